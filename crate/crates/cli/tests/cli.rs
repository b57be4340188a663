use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;
use tempfile::TempDir;
use vragent_core::trajectory::parse_trajectories;

/// Copies the fixtures into a scratch directory so runs never write into
/// the source tree.
fn workspace() -> TempDir {
    let dir = tempfile::tempdir().unwrap();
    let src = Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures");
    for entry in fs::read_dir(src).unwrap() {
        let entry = entry.unwrap();
        fs::copy(entry.path(), dir.path().join(entry.file_name())).unwrap();
    }
    dir
}

fn vragent(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_vragent"))
        .args(args)
        .current_dir(dir)
        .env_remove("VRAGENT_SEED")
        .env_remove("VRAGENT_OUTPUT_DIR")
        .output()
        .unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

fn events(path: &Path) -> Vec<Value> {
    fs::read_to_string(path).unwrap().lines().map(|l| serde_json::from_str(l).unwrap()).collect()
}

fn run_scripted(dir: &Path, id: &str, extra: &[&str]) -> Output {
    let mut args = vec!["run", "--config", "scripted.toml", "--image", "scan.png", "--question", "What is seen?", "--id", id];
    args.extend_from_slice(extra);
    vragent(dir, &args)
}

#[test]
fn mock_run_gives_fixed_answer_and_path() {
    let ws = workspace();
    let o = vragent(ws.path(), &["run", "--config", "mock.toml", "--image", "x.png", "--question", "What is seen?", "--json"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let path: Value = serde_json::from_str(stdout(&o).trim()).unwrap();
    // Scores 3 then 4: the second root child wins and its child is added next.
    assert_eq!(path["node_ids"], serde_json::json!([0, 2, 3]));
    assert_eq!(path["total_reward"], 8.0);
    assert_eq!(path["final_answer"], "Opacity in the left lower lobe.");
    assert_eq!(stdout(&vragent(ws.path(), &["run", "--config", "mock.toml", "--image", "x.png", "--question", "What is seen?", "--json"])), stdout(&o));
}

#[test]
fn human_readable_run_output() {
    let ws = workspace();
    let o = run_scripted(ws.path(), "h1", &[]);
    assert_eq!(code(&o), 0);
    let out = stdout(&o);
    assert!(out.contains("answer: composed final answer"), "{out}");
    assert!(out.contains("path: 0 -> 2 -> 6 (total reward 7)"), "{out}");
    assert!(ws.path().join("out/journal-h1.jsonl").exists());
}

#[test]
fn missing_config_is_a_config_error() {
    let ws = workspace();
    let o = vragent(ws.path(), &["run", "--config", "absent.toml", "--image", "a", "--question", "b"]);
    assert_eq!(code(&o), 3);
    assert!(String::from_utf8_lossy(&o.stderr).contains("config error"));
}

#[test]
fn config_naming_missing_script_is_a_config_error() {
    let ws = workspace();
    fs::write(ws.path().join("bad.toml"), "[backends.default]\nmock = \"nowhere.jsonl\"\n").unwrap();
    let o = vragent(ws.path(), &["run", "--config", "bad.toml", "--image", "a", "--question", "b"]);
    assert_eq!(code(&o), 3);
}

#[test]
fn usage_errors_exit_2() {
    let ws = workspace();
    assert_eq!(code(&vragent(ws.path(), &["run", "--config", "scripted.toml"])), 2);
    assert_eq!(code(&vragent(ws.path(), &["frobnicate"])), 2);
}

#[test]
fn entities_flag_reaches_the_detector() {
    let ws = workspace();
    let o = run_scripted(ws.path(), "e1", &["--entities", "lung, heart"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let ev = events(&ws.path().join("out/journal-e1.jsonl"));
    let detector = ev.iter().find(|e| e["event"] == "call" && e["kind"] == "detector").unwrap();
    assert_eq!(detector["input"].as_str().unwrap().lines().nth(1), Some("lung,heart"));
    let rois = ev.iter().find(|e| e["event"] == "rois").unwrap();
    assert_eq!(rois["rois"].as_array().unwrap().len(), 2);

    let o = run_scripted(ws.path(), "e2", &[]);
    assert_eq!(code(&o), 0);
    let ev = events(&ws.path().join("out/journal-e2.jsonl"));
    let rois = ev.iter().find(|e| e["event"] == "rois").unwrap();
    assert_eq!(rois["rois"].as_array().unwrap().len(), 1);
}

#[test]
fn unreachable_backend_exits_5() {
    let ws = workspace();
    let port = std::net::TcpListener::bind("127.0.0.1:0").unwrap().local_addr().unwrap().port();
    let cfg = format!(
        "[backends.default.http]\nurl = \"http://127.0.0.1:{port}/v1/chat/completions\"\nmodel = \"m\"\nretries = 0\ntimeout_secs = 2\n"
    );
    fs::write(ws.path().join("http.toml"), cfg).unwrap();
    let o = vragent(ws.path(), &["run", "--config", "http.toml", "--image", "a.png", "--question", "b"]);
    assert_eq!(code(&o), 5, "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn seed_precedence_is_flag_then_env_then_file() {
    let ws = workspace();
    let seed_of = |id: &str| {
        let ev = events(&ws.path().join(format!("out/journal-{id}.jsonl")));
        ev[0]["config"]["rng_seed"].as_u64().unwrap()
    };
    assert_eq!(code(&run_scripted(ws.path(), "s1", &[])), 0);
    assert_eq!(seed_of("s1"), 7);
    let with_env = |id: &str, extra: &[&str]| {
        let mut args = vec!["run", "--config", "scripted.toml", "--image", "a.png", "--question", "q", "--id", id];
        args.extend_from_slice(extra);
        Command::new(env!("CARGO_BIN_EXE_vragent")).args(args).current_dir(ws.path()).env("VRAGENT_SEED", "21").output().unwrap()
    };
    assert_eq!(code(&with_env("s2", &[])), 0);
    assert_eq!(seed_of("s2"), 21);
    assert_eq!(code(&with_env("s3", &["--seed", "99"])), 0);
    assert_eq!(seed_of("s3"), 99);
}

#[test]
fn batch_writes_one_output_per_record() {
    let ws = workspace();
    let o = vragent(ws.path(), &["batch", "--config", "scripted.toml", "--dataset", "dataset.jsonl", "--out", "b/out.jsonl"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let lines: Vec<Value> =
        fs::read_to_string(ws.path().join("b/out.jsonl")).unwrap().lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(lines.len(), 2);
    assert_eq!(lines[0]["id"], "q1");
    assert_eq!(lines[1]["id"], "q2");
    let summary: Value = serde_json::from_str(&fs::read_to_string(ws.path().join("b/out.summary.json")).unwrap()).unwrap();
    assert_eq!(summary["completed"], 2);
    assert_eq!(summary["failures"], 0);
    let m = &summary["metrics"];
    // q1 predicts its reference exactly, q2 shares nothing with "no".
    assert_eq!(m["open_recall"], 1.0);
    assert_eq!(m["closed_precision"], 0.0);
    assert_eq!(m["rouge_l"], 0.5);
    for key in ["bleu", "rouge_l", "open_recall", "closed_precision"] {
        assert!(m.get(key).is_some(), "{key}");
    }
}

#[test]
fn batch_skips_malformed_lines() {
    let ws = workspace();
    let o = vragent(ws.path(), &["batch", "--config", "scripted.toml", "--dataset", "dataset_bad.jsonl", "--out", "out.jsonl"]);
    assert_eq!(code(&o), 0);
    let summary: Value = serde_json::from_str(&fs::read_to_string(ws.path().join("out.summary.json")).unwrap()).unwrap();
    assert_eq!(summary["input_lines"], 3);
    assert_eq!(summary["completed"], 2);
    assert_eq!(summary["failures"], 1);
    assert_eq!(summary["failed"][0]["line"], 3);
}

#[test]
fn closed_only_batch_has_no_open_metric() {
    let ws = workspace();
    let o = vragent(ws.path(), &["batch", "--config", "scripted.toml", "--dataset", "dataset_closed.jsonl", "--out", "c.jsonl"]);
    assert_eq!(code(&o), 0);
    let summary: Value = serde_json::from_str(&fs::read_to_string(ws.path().join("c.summary.json")).unwrap()).unwrap();
    assert!(summary["metrics"]["open_recall"].is_null());
    assert!(summary["metrics"]["closed_precision"].is_number());
    assert!(stdout(&o).contains("absent"));
}

#[test]
fn batch_output_does_not_depend_on_parallelism() {
    let ws = workspace();
    let mut rows = String::new();
    for i in 0..8 {
        let kind = if i % 2 == 0 { "open" } else { "closed" };
        rows.push_str(&format!(
            "{{\"id\":\"r{i}\",\"image\":\"img{i}.png\",\"question\":\"question {i}?\",\"answer\":\"answer {i}\",\"type\":\"{kind}\"}}\n"
        ));
    }
    fs::write(ws.path().join("eight.jsonl"), rows).unwrap();
    for (out, par) in [("p1.jsonl", "1"), ("p4.jsonl", "4")] {
        let o = vragent(ws.path(), &["batch", "--config", "mock.toml", "--dataset", "eight.jsonl", "--out", out, "--parallel", par]);
        assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    }
    let a = fs::read_to_string(ws.path().join("p1.jsonl")).unwrap();
    assert_eq!(a.lines().count(), 8);
    assert_eq!(a, fs::read_to_string(ws.path().join("p4.jsonl")).unwrap());
    assert_eq!(
        fs::read_to_string(ws.path().join("p1.summary.json")).unwrap(),
        fs::read_to_string(ws.path().join("p4.summary.json")).unwrap()
    );
}

fn journal_of(ws: &TempDir, config: &str, id: &str) -> PathBuf {
    let o = vragent(ws.path(), &["run", "--config", config, "--image", "scan.png", "--question", "What is seen?", "--id", id, "--json"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    ws.path().join(format!("out/journal-{id}.jsonl"))
}

#[test]
fn replay_prints_the_same_path() {
    let ws = workspace();
    let o = vragent(ws.path(), &["run", "--config", "rag.toml", "--image", "scan.png", "--question", "What is seen?", "--id", "r", "--json"]);
    assert_eq!(code(&o), 0);
    let r = vragent(ws.path(), &["replay", "--journal", "out/journal-r.jsonl", "--json"]);
    assert_eq!(code(&r), 0);
    assert_eq!(stdout(&r), stdout(&o));
    let v = vragent(ws.path(), &["replay", "--journal", "out/journal-r.jsonl", "--verify"]);
    assert_eq!(code(&v), 0);
}

#[test]
fn truncated_journal_is_corrupt() {
    let ws = workspace();
    let j = journal_of(&ws, "scripted.toml", "t");
    let text = fs::read_to_string(&j).unwrap();
    let keep: Vec<&str> = text.lines().take(text.lines().count() - 1).collect();
    fs::write(ws.path().join("cut.jsonl"), keep.join("\n")).unwrap();
    assert_eq!(code(&vragent(ws.path(), &["replay", "--journal", "cut.jsonl"])), 6);
    fs::write(ws.path().join("garbage.jsonl"), "{not json\n").unwrap();
    assert_eq!(code(&vragent(ws.path(), &["replay", "--journal", "garbage.jsonl"])), 6);
    assert_eq!(code(&vragent(ws.path(), &["replay", "--journal", "no-such.jsonl"])), 4);
}

#[test]
fn tampered_result_fails_verification() {
    let ws = workspace();
    let j = journal_of(&ws, "scripted.toml", "v");
    let text = fs::read_to_string(&j).unwrap();
    let tampered = text.replace("\"total_reward\":7.0", "\"total_reward\":6.0");
    assert_ne!(tampered, text);
    fs::write(ws.path().join("tampered.jsonl"), tampered).unwrap();
    assert_eq!(code(&vragent(ws.path(), &["replay", "--journal", "tampered.jsonl"])), 0);
    assert_eq!(code(&vragent(ws.path(), &["replay", "--journal", "tampered.jsonl", "--verify"])), 7);
}

#[test]
fn exported_trajectories_follow_the_path() {
    let ws = workspace();
    let a = journal_of(&ws, "scripted.toml", "a");
    let b = journal_of(&ws, "mock.toml", "b");
    let o = vragent(
        ws.path(),
        &["export-trajectories", "--journal", a.to_str().unwrap(), "--journal", b.to_str().unwrap(), "--out", "t/traj.jsonl", "--baseline", "3.5"],
    );
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let trajs = parse_trajectories(&fs::read_to_string(ws.path().join("t/traj.jsonl")).unwrap()).unwrap();
    assert_eq!(trajs.len(), 2);
    // Path 0 -> 2 -> 6 scores 3 then 4.
    assert_eq!(trajs[0].query_id.as_deref(), Some("a"));
    assert_eq!(trajs[0].rewards(), vec![3.0, 4.0]);
    let adv: Vec<f64> = trajs[0].steps.iter().map(|s| s.advantage.unwrap()).collect();
    assert_eq!(adv, vec![-0.5, 0.5]);
    assert_eq!(trajs[1].final_answer, "Opacity in the left lower lobe.");
}

#[test]
fn vte_apply_boosts_region_tokens() {
    let ws = workspace();
    let o = vragent(ws.path(), &["vte-apply", "--tokens", "tokens.json", "--confidence", "0.9", "--out", "boosted.json"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    // a_roi = 1, a_bg = 3: beta = 0.9 * (3/1 - 1) = 1.8, region rows scale by 2.8.
    assert!(stdout(&o).contains("beta: 1.8"), "{}", stdout(&o));
    let out: Value = serde_json::from_str(&fs::read_to_string(ws.path().join("boosted.json")).unwrap()).unwrap();
    let rows: Vec<Vec<f64>> = serde_json::from_value(out["embeddings"].clone()).unwrap();
    let expect = [[2.8, 5.6], [1.4, -2.8], [3.0, 0.0], [-2.0, 1.0]];
    for (r, e) in rows.iter().zip(expect) {
        for (a, b) in r.iter().zip(e) {
            assert!((a - b).abs() < 1e-12);
        }
    }
    let k = vragent(ws.path(), &["vte-apply", "--tokens", "tokens.json", "--confidence", "0.9", "--kappa", "0", "--out", "same.json"]);
    assert!(stdout(&k).contains("beta: 0"));
    assert_eq!(code(&vragent(ws.path(), &["vte-apply", "--tokens", "tokens.json", "--confidence", "0.9", "--kappa", "2", "--out", "x.json"])), 3);
    assert_eq!(code(&vragent(ws.path(), &["vte-apply", "--tokens", "missing.json", "--confidence", "0.9", "--out", "x.json"])), 4);
    assert_eq!(code(&vragent(ws.path(), &["vte-apply", "--tokens", "tokens.json", "--confidence", "1.5", "--out", "x.json"])), 8);
}

#[test]
fn metrics_report_as_json() {
    let ws = workspace();
    let o = vragent(ws.path(), &["metrics", "--dataset", "dataset.jsonl", "--predictions", "predictions.jsonl", "--json"]);
    assert_eq!(code(&o), 0);
    let m: Value = serde_json::from_str(&stdout(&o)).unwrap();
    assert_eq!(m["records"], 2);
    // "a composed answer" recalls 2 of the 3 reference tokens.
    assert!((m["open_recall"].as_f64().unwrap() - 2.0 / 3.0).abs() < 1e-12);
    assert_eq!(m["closed_precision"], 1.0);
    assert!(m["meteor"].is_null());
    let t = vragent(ws.path(), &["metrics", "--dataset", "dataset.jsonl", "--predictions", "predictions.jsonl"]);
    assert!(stdout(&t).contains("METEOR") && stdout(&t).contains("absent"));
    fs::write(ws.path().join("short.jsonl"), "{\"id\":\"q1\",\"prediction\":\"x\"}\n").unwrap();
    assert_eq!(code(&vragent(ws.path(), &["metrics", "--dataset", "dataset.jsonl", "--predictions", "short.jsonl"])), 8);
}
