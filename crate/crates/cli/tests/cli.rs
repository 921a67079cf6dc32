#[path = "../../core/tests/common/mod.rs"]
mod common;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::{json, Value};

fn data(name: &str) -> String {
    Path::new(env!("CARGO_MANIFEST_DIR"))
        .join("../../data")
        .join(name)
        .to_str()
        .unwrap()
        .to_string()
}

fn kbqa(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_kbqa"))
        .args(args)
        .env_remove("KBQA_ENDPOINT")
        .output()
        .unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8(o.stdout.clone()).unwrap()
}

fn ok_json(o: Output) -> Value {
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    serde_json::from_str(&stdout(&o)).unwrap()
}

fn run_args<'a>(out: &'a str, policy: &'a str) -> Vec<String> {
    [
        "run",
        "--kb",
        &data("fixture_kb1.triples"),
        "--kb",
        &data("kb2.triples"),
        "--dataset",
        &data("desk_dataset.jsonl"),
        "--policy",
        policy,
        "--out",
        out,
    ]
    .iter()
    .map(|s| s.to_string())
    .collect()
}

fn run(out: &Path, policy: &str, extra: &[&str]) -> Output {
    let mut args = run_args(out.to_str().unwrap(), policy);
    args.extend(extra.iter().map(|s| s.to_string()));
    let refs: Vec<&str> = args.iter().map(String::as_str).collect();
    kbqa(&refs)
}

#[test]
fn compile_outputs() {
    let o = kbqa(&["compile", "(JOIN r m.01)", "--actions"]);
    assert_eq!(stdout(&o), "Find_relation [ m.01 | r ]\n");
    let o = kbqa(&["compile", "(JOIN r m.01)", "--sparql"]);
    assert_eq!(stdout(&o), "SELECT DISTINCT ?x0 WHERE { ?x0 <r> <m.01> . }\n");
    let o = kbqa(&["compile", "(COUNT (AND people.person (JOIN r m.01)))", "--actions"]);
    assert_eq!(
        stdout(&o),
        "Find_relation [ m.01 | r ]\nMerge [ people.person | expression1 ]\nCount [ expression1 ]\n"
    );
}

#[test]
fn exit_codes() {
    let o = kbqa(&["compile", "(JOIN r", "--sparql"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("position"));
    assert_eq!(kbqa(&["compile", "(JOIN r m.01)"]).status.code(), Some(2));
    assert_eq!(kbqa(&["compile", "(JOIN r m.01)", "--sparql", "--bogus"]).status.code(), Some(2));
    assert_eq!(kbqa(&["frobnicate"]).status.code(), Some(2));
    assert_eq!(kbqa(&[]).status.code(), Some(2));
    assert_eq!(kbqa(&["--help"]).status.code(), Some(0));

    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("t.jsonl");
    assert_eq!(run(&out, "sometimes", &[]).status.code(), Some(2));
    assert_eq!(run(&out, "gold", &["--workers", "0"]).status.code(), Some(2));
    assert_eq!(run(&out, "gold", &["--allow-actions", "Jump"]).status.code(), Some(2));
    let o = kbqa(&["run", "--kb", "/nonexistent.triples", "--dataset", &data("desk_dataset.jsonl"), "--out", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
    // Remote without URL or environment fallback is a domain error.
    assert_eq!(run(&out, "remote", &[]).status.code(), Some(1));
}

#[test]
fn eval_merges_kbs() {
    let v = ok_json(kbqa(&[
        "eval",
        "--kb",
        &data("fixture_kb1.triples"),
        "--kb",
        &data("kb2.triples"),
        "(JOIN people.person.place_of_birth m.20)",
    ]));
    assert_eq!(v, json!({"kind": "entities", "total": 2, "answers": ["m.01", "m.02"]}));
    let v = ok_json(kbqa(&["eval", "--kb", &data("kb2.triples"), "(COUNT (JOIN film.film.directed_by m.100))"]));
    assert_eq!(v, json!({"kind": "number", "value": 4}));
}

#[test]
fn random_policy_is_weak_and_order_stable() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a.jsonl");
    let b = dir.path().join("b.jsonl");
    let s = ok_json(run(&a, "random", &["--seed", "3"]));
    assert!(s["mean_f1"].as_f64().unwrap() < 0.2, "{s}");
    ok_json(run(&b, "random", &["--seed", "3", "--workers", "4"]));
    assert_eq!(fs::read(&a).unwrap(), fs::read(&b).unwrap());
    let c = dir.path().join("c.jsonl");
    ok_json(run(&c, "random", &["--seed", "4"]));
    assert_ne!(fs::read(&a).unwrap(), fs::read(&c).unwrap());
}

#[test]
fn gold_run_with_workers_matches_serial() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a.jsonl");
    let b = dir.path().join("b.jsonl");
    ok_json(run(&a, "gold", &[]));
    ok_json(run(&b, "gold", &["--workers", "3"]));
    assert_eq!(fs::read(&a).unwrap(), fs::read(&b).unwrap());
    let qids: Vec<String> = fs::read_to_string(&a)
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str::<Value>(l).unwrap()["qid"].as_str().unwrap().to_string())
        .collect();
    assert_eq!(qids, (1..=10).map(|i| format!("q{i:02}")).collect::<Vec<_>>());
}

/// Chat endpoint that replays the gold action for the question it is asked
/// about, one action per call, then answers.
fn mock_chat() -> String {
    let kb = kbqa_core::kb::KnowledgeBase::parse(&format!(
        "{}{}",
        fs::read_to_string(data("fixture_kb1.triples")).unwrap(),
        fs::read_to_string(data("kb2.triples")).unwrap()
    ))
    .0;
    let records = kbqa_core::dataset::load_dataset(data("desk_dataset.jsonl")).unwrap();
    common::serve(move |req| {
        let body: Value = serde_json::from_str(&req.body).unwrap();
        let messages = body["messages"].as_array().unwrap();
        let prompt = messages[0]["content"].as_str().unwrap();
        let record = records
            .iter()
            .find(|r| prompt.contains(&format!("Question: {}.", r.question)))
            .unwrap();
        let tree = record.gold_tree().unwrap();
        let actions = kbqa_core::expression::extract_actions(&tree).unwrap();
        let turn = messages.len() / 2;
        let content = match actions.get(turn) {
            Some(a) => format!("<think>next</think>\n<action>{a}</action>\n"),
            None => format!("<think>done</think>\n<answer>{}</answer>\n", kb.evaluate(&tree).answers().join(" ")),
        };
        (200, json!({"choices": [{"message": {"role": "assistant", "content": content}}]}).to_string())
    })
}

#[test]
fn remote_policy_against_mock() {
    let url = mock_chat();
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("remote.jsonl");
    let s = ok_json(run(&out, &format!("remote:{url}"), &["--workers", "2"]));
    assert_eq!(s["mean_reward"], 1.1, "{s}");

    // The environment variable stands in for a missing URL.
    let mut args = run_args(out.to_str().unwrap(), "remote");
    args.extend(["--timeout".to_string(), "5".to_string()]);
    let o = Command::new(env!("CARGO_BIN_EXE_kbqa"))
        .args(&args)
        .env("KBQA_ENDPOINT", &url)
        .output()
        .unwrap();
    assert_eq!(ok_json(o)["accepted"], 10);
}

#[test]
fn unreachable_remote_is_recorded_not_fatal() {
    let port = std::net::TcpListener::bind("127.0.0.1:0").unwrap().local_addr().unwrap().port();
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("t.jsonl");
    let s = ok_json(run(&out, &format!("remote:http://127.0.0.1:{port}"), &["--timeout", "2"]));
    assert_eq!(s["terminal"]["policy_failure"], 10);
    assert_eq!(s["mean_reward"], 0.0);
}

#[test]
fn config_file_supplies_flags() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.conf");
    let out = dir.path().join("t.jsonl");
    fs::write(
        &cfg,
        format!(
            "# desk run\nkb = {}\nkb = {}\ndataset = {}\nout = {}\npolicy = random\nseed = 9\nreference_hints = false\n",
            data("fixture_kb1.triples"),
            data("kb2.triples"),
            data("desk_dataset.jsonl"),
            out.display()
        ),
    )
    .unwrap();
    let from_file = ok_json(kbqa(&["run", "--config", cfg.to_str().unwrap()]));
    let direct_out = dir.path().join("d.jsonl");
    let direct = ok_json(run(&direct_out, "random", &["--seed", "9"]));
    assert_eq!(from_file, direct);
    assert_eq!(fs::read(&out).unwrap(), fs::read(&direct_out).unwrap());

    // Command-line flags win over the file.
    let s = ok_json(kbqa(&["run", "--config", cfg.to_str().unwrap(), "--policy", "gold"]));
    assert_eq!(s["mean_reward"], 1.1);

    fs::write(&cfg, "nonsense_flag = 1\n").unwrap();
    assert_eq!(kbqa(&["run", "--config", cfg.to_str().unwrap()]).status.code(), Some(2));
}

#[test]
fn referenced_rollouts_filter_to_clean_sft() {
    let dir = tempfile::tempdir().unwrap();
    let traj = dir.path().join("ref.jsonl");
    let s = ok_json(run(&traj, "gold", &["--reference-hints"]));
    assert_eq!(s["accepted"], 10);
    let text = fs::read_to_string(&traj).unwrap();
    assert!(text.contains("<reference>Next action:"));

    let sft = dir.path().join("sft.jsonl");
    let r = ok_json(kbqa(&[
        "rrs-filter",
        "--in",
        traj.to_str().unwrap(),
        "--gold",
        &data("desk_dataset.jsonl"),
        "--out",
        sft.to_str().unwrap(),
    ]));
    assert_eq!(r["acceptance_rate"], 1.0);
    let out = fs::read_to_string(&sft).unwrap();
    assert_eq!(out.lines().count(), 10);
    assert!(!out.contains("reference"), "hints leaked into SFT data");
}

#[test]
fn rrs_filter_schema_errors() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.jsonl");
    let sft = dir.path().join("sft.jsonl");
    let filter = |input: &PathBuf| {
        kbqa(&[
            "rrs-filter",
            "--in",
            input.to_str().unwrap(),
            "--gold",
            &data("desk_dataset.jsonl"),
            "--out",
            sft.to_str().unwrap(),
        ])
    };
    fs::write(&bad, "{\"not\": \"a trajectory\"}\n").unwrap();
    assert_eq!(filter(&bad).status.code(), Some(1));

    let good = dir.path().join("good.jsonl");
    ok_json(run(&good, "gold", &[]));
    let first = fs::read_to_string(&good).unwrap().lines().next().unwrap().replace("\"q01\"", "\"q99\"");
    fs::write(&bad, first + "\n").unwrap();
    assert_eq!(filter(&bad).status.code(), Some(1));
}

#[test]
fn rrs_build_lists_gold_actions() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("prompts.jsonl");
    let s = ok_json(kbqa(&["rrs-build", "--dataset", &data("desk_dataset.jsonl"), "--out", out.to_str().unwrap()]));
    assert_eq!(s["written"], 10);
    let first: Value = serde_json::from_str(fs::read_to_string(&out).unwrap().lines().next().unwrap()).unwrap();
    let prompt = first["prompt"].as_str().unwrap();
    assert!(prompt.ends_with("Find_relation [ m.20 | people.person.place_of_birth ]\n</reference>"));
    assert_eq!(first["reference_actions"], json!(["Find_relation [ m.20 | people.person.place_of_birth ]"]));
}

#[test]
fn action_mask_blocks_unavailable_actions() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("masked.jsonl");
    ok_json(run(&out, "gold", &["--allow-actions", "Find_relation,Merge"]));
    let mut blocked = 0;
    for line in fs::read_to_string(&out).unwrap().lines() {
        let t: Value = serde_json::from_str(line).unwrap();
        let prompt = t["prompt"].as_str().unwrap();
        assert!(prompt.contains("Available Actions : Find_relation [ entity | relation ]; Merge [ expression1 | expression ]\n"));
        let transcript = t["transcript"].as_str().unwrap();
        if transcript.contains("is not available for this question.") {
            blocked += 1;
        }
    }
    // Every question outside plain Find_relation/Merge hits the mask.
    assert_eq!(blocked, 7);
}

#[test]
fn score_and_advantages() {
    let dir = tempfile::tempdir().unwrap();
    let t = dir.path().join("t.txt");
    fs::write(
        &t,
        "<think>a</think><action>Find_relation [ m.20 | people.person.place_of_birth ]</action>\
<information>Results (2 total): m.01, m.02</information><think>b</think><answer>m.01 m.02</answer>",
    )
    .unwrap();
    let v = ok_json(kbqa(&["score", "--transcript", t.to_str().unwrap(), "--gold", r#"["m.01","m.02"]"#]));
    assert_eq!(v["reward"]["total"], 1.1);
    assert_eq!(v["format"]["tags_complete"], true);
    let v = ok_json(kbqa(&["score", "--transcript", t.to_str().unwrap(), "--gold", r#"[["m.03"],["m.01"]]"#]));
    assert_eq!(v["reward"]["best_variant_index"], 1);
    assert_eq!(kbqa(&["score", "--transcript", t.to_str().unwrap(), "--gold", "m.01"]).status.code(), Some(1));

    let v = ok_json(kbqa(&["advantages", "--rewards", "1,0,0.5,0.5,0.5"]));
    assert_eq!(v["advantages"], json!([0.5, -0.5, 0.0, 0.0, 0.0]));
    let v = ok_json(kbqa(&["score-advantages", "--rewards", "-1,1"]));
    assert_eq!(v["advantages"], json!([-1.0, 1.0]));

    let g = dir.path().join("group.json");
    fs::write(
        &g,
        json!({
            "rewards": [2.0, 0.0],
            "token_logps_new": [[1.5f64.ln()], [0.0]],
            "token_logps_old": [[0.0], [0.0]],
            "token_logps_ref": [[0.0], [0.0]],
        })
        .to_string(),
    )
    .unwrap();
    let v = ok_json(kbqa(&["advantages", "--group", g.to_str().unwrap(), "--beta", "0"]));
    assert!((v["objective"].as_f64().unwrap() - 0.14).abs() < 1e-12, "{v}");
    assert_eq!(kbqa(&["advantages", "--rewards", ""]).status.code(), Some(2));
}
