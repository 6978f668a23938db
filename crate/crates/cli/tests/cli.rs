use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::{json, Value};
use tempfile::TempDir;

use unlearn_core::guidance::{GuidanceSpec, Variant};
use unlearn_core::decoder::{build_contexts, DecodeRequest};
use unlearn_core::lm::{TabularLM, Vocabulary};
use unlearn_core::mock_http::{MockRequest, MockResponse, MockServer};
use unlearn_core::model_arith::{Checkpoint, DType, NamedTensor};

fn unlearn(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_unlearn"))
        .args(args)
        .env_remove("UNLEARN_API_KEY")
        .output()
        .expect("spawn unlearn")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exit code")
}

fn stdout_json(out: &Output) -> Value {
    assert_eq!(code(out), 0, "stderr: {}", String::from_utf8_lossy(&out.stderr));
    serde_json::from_slice(&out.stdout).expect("JSON on stdout")
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn fixtures() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../core/tests/fixtures")
}

// ---- subtract ----

fn write_pair(dir: &Path, base: &[f32], ft: &[f32]) -> (PathBuf, PathBuf) {
    let mk = |v: &[f32]| {
        Checkpoint::new(vec![
            NamedTensor::from_values("emb", DType::F32, vec![v.len()], v).unwrap(),
            NamedTensor::from_values("head", DType::BF16, vec![1, v.len()], v).unwrap(),
        ])
    };
    let (b, f) = (dir.join("base.safetensors"), dir.join("ft.safetensors"));
    mk(base).save(&b).unwrap();
    mk(ft).save(&f).unwrap();
    (b, f)
}

#[test]
fn subtract_alpha_zero_keeps_base_payload() {
    let dir = TempDir::new().unwrap();
    let (b, f) = write_pair(dir.path(), &[1.0, 2.0, -3.0], &[1.5, 0.0, -3.0]);
    let out = dir.path().join("out.safetensors");
    let res = unlearn(&["subtract", "--base", p(&b), "--finetuned", p(&f), "--alpha", "0", "--out", p(&out)]);
    let summary = stdout_json(&res);
    assert_eq!(summary["tensors"], 2);

    let base = Checkpoint::load(&b).unwrap();
    let got = Checkpoint::load(&out).unwrap();
    for name in ["emb", "head"] {
        assert_eq!(got.tensor(name).unwrap().bytes(), base.tensor(name).unwrap().bytes());
    }
    // The resolved configuration travels in the header metadata.
    let raw = std::fs::read(&out).unwrap();
    let n = u64::from_le_bytes(raw[..8].try_into().unwrap()) as usize;
    let header: Value = serde_json::from_slice(&raw[8..8 + n]).unwrap();
    let echo: Value = serde_json::from_str(header["__metadata__"]["unlearn.config"].as_str().unwrap()).unwrap();
    assert_eq!(echo["subtract"]["alpha"], 0.0);
}

#[test]
fn subtract_half_alpha_matches_hand_values() {
    let dir = TempDir::new().unwrap();
    let (b, f) = write_pair(dir.path(), &[1.0, 2.0, -3.0], &[1.5, 0.0, -3.0]);
    let out = dir.path().join("out.safetensors");
    let res = unlearn(&["subtract", "--base", p(&b), "--finetuned", p(&f), "--alpha", "0.5", "--out", p(&out)]);
    assert_eq!(code(&res), 0);
    let got = Checkpoint::load(&out).unwrap();
    // b - 0.5 (f - b), all exactly representable.
    assert_eq!(got.tensor("emb").unwrap().values(), vec![0.75, 3.0, -3.0]);
    assert_eq!(got.tensor("head").unwrap().values(), vec![0.75, 3.0, -3.0]);
}

#[test]
fn subtract_rejects_shape_mismatch() {
    let dir = TempDir::new().unwrap();
    let (b, _) = write_pair(dir.path(), &[1.0, 2.0], &[1.0, 2.0]);
    let f = dir.path().join("other.safetensors");
    Checkpoint::new(vec![
        NamedTensor::from_values("emb", DType::F32, vec![3], &[1.0, 2.0, 3.0]).unwrap(),
        NamedTensor::from_values("head", DType::BF16, vec![1, 2], &[1.0, 2.0]).unwrap(),
    ])
    .save(&f)
    .unwrap();
    let out = dir.path().join("out.safetensors");
    let res = unlearn(&["subtract", "--base", p(&b), "--finetuned", p(&f), "--out", p(&out)]);
    assert_eq!(code(&res), 2);
    assert!(String::from_utf8_lossy(&res.stderr).contains("emb"));
    assert!(!out.exists());
}

// ---- generate / eval pii ----

/// Three-token pathology: under the two conditions the model puts its mass
/// as in the classic counterexample, so log-space and probability-space
/// guidance pick different tokens.
fn pathology_model(dir: &Path) -> (PathBuf, PathBuf) {
    let prompt = "System: s\nUser: hi\nAssistant:";
    let scaffold = "System: s Do not provide any personal data. You should share in the answers. User: hi Assistant:";
    let mut words: Vec<String> = vec!["<unk>".into(), "<eos>".into(), "x".into(), "y".into(), "Alice".into()];
    for w in scaffold.split_whitespace() {
        if !words.iter().any(|x| x == w) {
            words.push(w.into());
        }
    }
    let v = words.len();
    let vocab = Vocabulary::new(words, 1).unwrap();
    let req = DecodeRequest::greedy(prompt, GuidanceSpec::new(1.0, Variant::DualProb).unwrap(), 1);
    let (pos, neg) = build_contexts(&vocab, &req).unwrap();
    let row = |probs: [f64; 3]| {
        let mut r = vec![-40.0; v];
        r[2] = probs[0].ln();
        r[3] = probs[1].ln();
        r[4] = probs[2].ln();
        r
    };
    let mut stop = vec![-40.0; v];
    stop[1] = 0.0;
    let mut m = TabularLM::new(vocab, pos.len().max(neg.len()), vec![0.0; v]).unwrap();
    m.insert(pos, row([0.90, 0.08, 0.02])).unwrap();
    m.insert(neg, row([0.50, 0.4999, 0.0001])).unwrap();
    for t in [2, 3, 4] {
        m.insert(vec![t], stop.clone()).unwrap();
    }
    let model = dir.join("model.json");
    m.save(&model).unwrap();
    let prompts = dir.join("prompts.jsonl");
    std::fs::write(&prompts, format!("{}\n", json!({"id": "p1", "prompt": prompt}))).unwrap();
    (model, prompts)
}

fn gen_text(out: &Output) -> String {
    stdout_json(out)["completions"][0]["text"].as_str().unwrap().to_string()
}

#[test]
fn generate_variants_diverge_on_pathology() {
    let dir = TempDir::new().unwrap();
    let (m, pr) = pathology_model(dir.path());
    let base = ["generate", "--model", p(&m), "--prompts", p(&pr), "--gamma", "3"];
    let log = unlearn(&[&base[..], &["--variant", "dual-log"]].concat());
    let prob = unlearn(&[&base[..], &["--variant", "dual-prob"]].concat());
    assert_eq!(gen_text(&log), "Alice");
    assert_eq!(gen_text(&prob), "x");
}

#[test]
fn generate_gamma_one_is_positive_decode() {
    let dir = TempDir::new().unwrap();
    let (m, pr) = pathology_model(dir.path());
    for variant in ["dual-log", "dual-prob"] {
        let out = unlearn(&["generate", "--model", p(&m), "--prompts", p(&pr), "--gamma", "1", "--variant", variant]);
        assert_eq!(gen_text(&out), "x");
    }
}

#[test]
fn generate_sampling_is_seeded() {
    let dir = TempDir::new().unwrap();
    let (m, pr) = pathology_model(dir.path());
    let run = |seed: &str| {
        let out = unlearn(&["generate", "--model", p(&m), "--prompts", p(&pr), "--mode", "sample", "--seed", seed, "--trace"]);
        assert_eq!(code(&out), 0);
        out.stdout
    };
    assert_eq!(run("11"), run("11"));
}

#[test]
fn generate_rejects_bad_variant_and_gamma() {
    let dir = TempDir::new().unwrap();
    let (m, pr) = pathology_model(dir.path());
    let bad = unlearn(&["generate", "--model", p(&m), "--prompts", p(&pr), "--variant", "log-prob"]);
    assert_eq!(code(&bad), 1);
    let neg = unlearn(&["generate", "--model", p(&m), "--prompts", p(&pr), "--gamma", "-1"]);
    assert_eq!(code(&neg), 1);
}

#[test]
fn eval_pii_counts_and_repeats_byte_identically() {
    let dir = TempDir::new().unwrap();
    let (m, pr) = pathology_model(dir.path());
    let gaz = fixtures().join("gazetteers");
    let run = |variant: &str, out: &Path| {
        let res = unlearn(&[
            "eval", "pii", "--model", p(&m), "--samples", p(&pr), "--gazetteers", p(&gaz),
            "--variant", variant, "--gamma", "3", "--out", p(out),
        ]);
        assert_eq!(code(&res), 0, "{}", String::from_utf8_lossy(&res.stderr));
        std::fs::read(out).unwrap()
    };
    let a = run("dual-log", &dir.path().join("a.json"));
    let b = run("dual-log", &dir.path().join("b.json"));
    assert_eq!(a, b);
    let report: Value = serde_json::from_slice(&a).unwrap();
    assert_eq!(report["totals"]["total_pii"], 1);
    let c: Value = serde_json::from_slice(&run("dual-prob", &dir.path().join("c.json"))).unwrap();
    assert_eq!(c["totals"]["total_pii"], 0);
}

// ---- orpo-loss ----

#[test]
fn orpo_loss_reports_records_and_aggregate() {
    let dir = TempDir::new().unwrap();
    let input = dir.path().join("in.jsonl");
    std::fs::write(
        &input,
        "{\"chosen_logprobs\":[-0.5,-0.5],\"rejected_logprobs\":[-0.5,-0.5]}\n\n{\"chosen_logprobs\":[-0.1],\"rejected_logprobs\":[-3.0]}\n",
    )
    .unwrap();
    let v = stdout_json(&unlearn(&["orpo-loss", "--input", p(&input)]));
    let recs = v["records"].as_array().unwrap();
    assert_eq!(recs.len(), 2);
    assert_eq!(recs[1]["line"], 3);
    assert_eq!(recs[0]["or_term"].as_f64().unwrap(), std::f64::consts::LN_2);
    assert!((recs[0]["total"].as_f64().unwrap() - (0.5 + 0.1 * std::f64::consts::LN_2)).abs() < 1e-12);
    assert_eq!(v["aggregate"]["records"], 2);
    assert_eq!(v["config"]["orpo"]["beta"], 0.1);

    let bad = dir.path().join("bad.jsonl");
    std::fs::write(&bad, "{\"chosen_logprobs\":[0.5],\"rejected_logprobs\":[-1]}\n").unwrap();
    assert_eq!(code(&unlearn(&["orpo-loss", "--input", p(&bad)])), 2);
    assert_eq!(code(&unlearn(&["orpo-loss", "--input", p(&input), "--beta", "-1"])), 1);
}

// ---- build-dataset ----

fn reply(req: &MockRequest) -> MockResponse {
    let text = "I would rather not say.";
    if req.path.ends_with("/chat/completions") {
        MockResponse::json(json!({"choices": [{"message": {"role": "assistant", "content": text}}]}))
    } else {
        MockResponse::json(json!({"choices": [{"text": text}]}))
    }
}

fn build(dir: &Path, endpoint: &str, extra: &[&str]) -> Output {
    let out = dir.join("out");
    let gaz = fixtures().join("gazetteers");
    let dialogues = fixtures().join("dialogues.jsonl");
    let mut args = vec![
        "build-dataset", "--dialogues", p(&dialogues), "--gazetteers", p(&gaz), "--endpoint", endpoint, "--out-dir", p(&out),
    ];
    args.extend_from_slice(extra);
    unlearn(&args)
}

fn lines(path: &Path) -> Vec<Value> {
    std::fs::read_to_string(path)
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect()
}

#[test]
fn build_dataset_is_deterministic_and_augments() {
    let server = MockServer::start(reply);
    let (d1, d2, d3) = (TempDir::new().unwrap(), TempDir::new().unwrap(), TempDir::new().unwrap());
    assert_eq!(code(&build(d1.path(), &server.url(), &[])), 0);
    assert_eq!(code(&build(d2.path(), &server.url(), &[])), 0);
    for f in ["train.jsonl", "test.jsonl", "drops.jsonl", "manifest.json"] {
        assert_eq!(
            std::fs::read(d1.path().join("out").join(f)).unwrap(),
            std::fs::read(d2.path().join("out").join(f)).unwrap(),
            "{f} differs between runs"
        );
    }
    let count = |d: &Path| lines(&d.join("out/train.jsonl")).len() + lines(&d.join("out/test.jsonl")).len();
    let plain = count(d1.path());
    assert_eq!(plain, 16 * 4);

    assert_eq!(code(&build(d3.path(), &server.url(), &["--cfg"])), 0);
    assert_eq!(count(d3.path()), 3 * plain);

    let manifest: Value = serde_json::from_str(&std::fs::read_to_string(d1.path().join("out/manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["stats"]["samples"], 16);
    assert_eq!(manifest["config"]["dataset"]["split_ratio"], 0.9);
}

#[test]
fn build_dataset_offline_uses_cache_only() {
    let server = MockServer::start(reply);
    let live = TempDir::new().unwrap();
    assert_eq!(code(&build(live.path(), &server.url(), &[])), 0);
    let used = server.request_count();

    let offline = TempDir::new().unwrap();
    let cache = live.path().join("out/candidates.jsonl");
    let res = build(offline.path(), &server.url(), &["--offline", "--cache", p(&cache)]);
    assert_eq!(code(&res), 0, "{}", String::from_utf8_lossy(&res.stderr));
    assert_eq!(server.request_count(), used);
    for f in ["train.jsonl", "test.jsonl"] {
        assert_eq!(
            std::fs::read(live.path().join("out").join(f)).unwrap(),
            std::fs::read(offline.path().join("out").join(f)).unwrap()
        );
    }
}

#[test]
fn build_dataset_unreachable_api_exits_3() {
    let dir = TempDir::new().unwrap();
    let cfg = dir.path().join("c.toml");
    std::fs::write(&cfg, "[api]\ntimeout_secs = 2\n[api.retry]\nmax_attempts = 1\n").unwrap();
    let res = build(dir.path(), "http://127.0.0.1:9", &["--config", p(&cfg)]);
    assert_eq!(code(&res), 3, "{}", String::from_utf8_lossy(&res.stderr));
}

// ---- eval judge ----

#[test]
fn eval_judge_with_mock() {
    let server = MockServer::start(|_| {
        MockResponse::json(json!({"choices": [{"message": {"role": "assistant", "content": "Correct"}}]}))
    });
    let dir = TempDir::new().unwrap();
    let items = dir.path().join("items.jsonl");
    let item: Value = serde_json::from_str(&std::fs::read_to_string(fixtures().join("judge_item.json")).unwrap()).unwrap();
    std::fs::write(&items, format!("{item}\n")).unwrap();
    let v = stdout_json(&unlearn(&["eval", "judge", "--items", p(&items), "--endpoint", &server.url()]));
    assert_eq!(v["correctness_rate"], 1.0);
    let golden = std::fs::read_to_string(fixtures().join("judge_prompt.golden.txt")).unwrap();
    let sent = server.requests()[0].json();
    assert_eq!(sent["messages"][0]["content"].as_str().unwrap(), golden);
}

// ---- configuration ----

#[test]
fn config_file_unknown_key_is_usage_error() {
    let dir = TempDir::new().unwrap();
    let cfg = dir.path().join("c.toml");
    std::fs::write(&cfg, "[guidance]\ngama = 2.0\n").unwrap();
    let input = dir.path().join("in.jsonl");
    std::fs::write(&input, "").unwrap();
    let res = unlearn(&["--config", p(&cfg), "orpo-loss", "--input", p(&input)]);
    assert_eq!(code(&res), 1);
}

#[test]
fn config_file_values_are_used_and_flags_override() {
    let dir = TempDir::new().unwrap();
    let cfg = dir.path().join("c.toml");
    std::fs::write(&cfg, "[orpo]\nbeta = 0.5\n").unwrap();
    let input = dir.path().join("in.jsonl");
    std::fs::write(&input, "{\"chosen_logprobs\":[-1],\"rejected_logprobs\":[-2]}\n").unwrap();
    let from_file = stdout_json(&unlearn(&["--config", p(&cfg), "orpo-loss", "--input", p(&input)]));
    assert_eq!(from_file["config"]["orpo"]["beta"], 0.5);
    let flagged = stdout_json(&unlearn(&["--config", p(&cfg), "orpo-loss", "--input", p(&input), "--beta", "0.2"]));
    assert_eq!(flagged["config"]["orpo"]["beta"], 0.2);
}

#[test]
fn help_and_missing_input() {
    assert_eq!(code(&unlearn(&["--help"])), 0);
    assert_eq!(code(&unlearn(&["orpo-loss"])), 1);
    assert_eq!(code(&unlearn(&["orpo-loss", "--input", "/nonexistent/in.jsonl"])), 2);
}
