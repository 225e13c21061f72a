use std::path::Path;
use std::process::{Command, Output};

fn softgen(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_softgen"))
        .args(args)
        .current_dir(dir)
        .env_remove("SOFTGEN_SEED")
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

#[test]
fn generate_replay_and_stats() {
    let dir = tempfile::tempdir().unwrap();
    let out = softgen(
        &["generate", "--task", "cube_stack", "--scripted", "--num", "4", "--seed", "3", "--out", "c.jsonl", "--workers", "2"],
        dir.path(),
    );
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let summary: serde_json::Value = serde_json::from_str(&stdout(&out)).unwrap();
    assert_eq!(summary["attempts"], 4);
    assert!(summary["wall_time"].as_f64().unwrap() >= 0.0);

    let replay = softgen(&["replay", "c.jsonl"], dir.path());
    assert!(replay.status.success());
    let n = summary["successes"].as_u64().unwrap();
    assert!(stdout(&replay).contains(&format!("{n}/{n} consistent")));

    let stats = softgen(&["stats", "c.jsonl"], dir.path());
    assert!(stats.status.success());
    let v: serde_json::Value = serde_json::from_str(&stdout(&stats)).unwrap();
    assert_eq!(v["subtasks"].as_array().unwrap().len(), 2);
}

#[test]
fn same_seed_same_bytes_and_env_override() {
    let dir = tempfile::tempdir().unwrap();
    let args = |out: &'static str, workers: &'static str| {
        vec!["generate", "--task", "rope_u", "--scripted", "--num", "3", "--seed", "5", "--out", out, "--workers", workers]
    };
    assert!(softgen(&args("a.jsonl", "1"), dir.path()).status.success());
    assert!(softgen(&args("b.jsonl", "3"), dir.path()).status.success());
    let a = std::fs::read(dir.path().join("a.jsonl")).unwrap();
    assert_eq!(a, std::fs::read(dir.path().join("b.jsonl")).unwrap());

    let env = Command::new(env!("CARGO_BIN_EXE_softgen"))
        .args(args("c.jsonl", "1"))
        .current_dir(dir.path())
        .env("SOFTGEN_SEED", "6")
        .output()
        .unwrap();
    assert!(env.status.success());
    assert_ne!(a, std::fs::read(dir.path().join("c.jsonl")).unwrap());
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    let unknown = softgen(&["generate", "--task", "juggle", "--scripted", "--out", "x.jsonl"], p);
    assert_eq!(unknown.status.code(), Some(2));
    let bad_seed = softgen(&["generate", "--task", "rope_u", "--scripted", "--seed", "x", "--out", "x.jsonl"], p);
    assert_eq!(bad_seed.status.code(), Some(2));
    let no_demos = softgen(&["generate", "--task", "rope_u", "--out", "x.jsonl"], p);
    assert_eq!(no_demos.status.code(), Some(2));
    let missing = softgen(&["replay", "nope.jsonl"], p);
    assert_eq!(missing.status.code(), Some(3));

    std::fs::write(p.join("other.jsonl"), "{\"schema\":\"other/v9\"}\n").unwrap();
    assert_eq!(softgen(&["replay", "other.jsonl"], p).status.code(), Some(4));

    std::fs::write(p.join("empty.jsonl"), "").unwrap();
    let empty = softgen(&["replay", "empty.jsonl"], p);
    assert_eq!(empty.status.code(), Some(0));
    assert!(stdout(&empty).contains("0/0 consistent"));

    std::fs::write(p.join("a.json"), "{\"nodes\":[[0,0,0],[1,0,0],[0,1,0],[0,0,1]]}").unwrap();
    std::fs::write(p.join("b.json"), "{\"nodes\":[[0,0,0],[1,0,0]]}").unwrap();
    assert_eq!(softgen(&["register", "a.json", "b.json"], p).status.code(), Some(2));
}

#[test]
fn tampered_record_is_flagged() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    let out = softgen(&["generate", "--task", "cube_stack", "--scripted", "--num", "2", "--seed", "1", "--out", "d.jsonl"], p);
    assert!(out.status.success());
    let text = std::fs::read_to_string(p.join("d.jsonl")).unwrap();
    let mut lines: Vec<String> = text.lines().map(String::from).collect();
    let last = lines.len() - 1;
    let mut rec: serde_json::Value = serde_json::from_str(&lines[last]).unwrap();
    assert_eq!(rec["success"], true);
    // drop the release so the cube is carried away
    let actions = rec["actions"].as_array_mut().unwrap();
    for a in actions.iter_mut() {
        a["g"] = serde_json::json!(1);
    }
    lines[last] = rec.to_string();
    std::fs::write(p.join("d.jsonl"), lines.join("\n") + "\n").unwrap();

    let replay = softgen(&["replay", "d.jsonl"], p);
    assert_eq!(replay.status.code(), Some(1));
    let trial = rec["trial_index"].as_u64().unwrap();
    assert!(stdout(&replay).contains(&format!("trial {trial}: inconsistent")), "{}", stdout(&replay));
}

#[test]
fn register_and_warp_dump_write_probes() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    std::fs::write(p.join("s.json"), "{\"nodes\":[[0,0,0],[1,0,0],[0,1,0],[0,0,1],[1,1,1]]}").unwrap();
    std::fs::write(p.join("t.json"), "{\"nodes\":[[1,0,0],[2,0,0],[1,1,0],[1,0,1],[2,1,1]]}").unwrap();
    let reg = softgen(&["register", "s.json", "t.json", "--grid", "2"], p);
    assert!(reg.status.success());
    let v: serde_json::Value = serde_json::from_str(&stdout(&reg)).unwrap();
    assert_eq!(v["probe"].as_array().unwrap().len(), 8);
    assert!(v["cost"].as_f64().unwrap() < 1e-9);

    let dump = softgen(&["warp-dump", "--task", "rope_u", "--scripted", "--seed", "2", "--grid", "2", "--out", "w.json"], p);
    assert!(dump.status.success(), "{}", String::from_utf8_lossy(&dump.stderr));
    let w: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(p.join("w.json")).unwrap()).unwrap();
    let subtasks = w["subtasks"].as_array().unwrap();
    assert_eq!(subtasks.len(), 2);
    for s in subtasks {
        assert_eq!(s["source_poses"].as_array().unwrap().len(), s["adapted_poses"].as_array().unwrap().len());
    }
}
