use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const TINY: &str = "\
experiment = exp1_union
synthetic_classes = 14
synthetic_exemplars = 3
train_classes = 8
widths = 4,4,8,8
embed_dim = 8
head_hidden = 8
g_variants = Lin
steps = 2
batch = 4
eval_episodes = 2
eval_queries_per_episode = 4
seeds = 1
log_every = 1
";

fn setcomp(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_setcomp"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn write_config(dir: &Path, text: &str) -> String {
    let p = dir.join("run.cfg");
    fs::write(&p, text).unwrap();
    p.to_string_lossy().into_owned()
}

fn stage(cmd: &str, cfg: &str, out: &Path) -> Output {
    setcomp(&[cmd, "--config", cfg, "--out", out.to_str().unwrap()])
}

fn checkpoint_digests(out: &Path) -> Vec<(String, Vec<u8>)> {
    let mut v: Vec<_> = fs::read_dir(out.join("checkpoints"))
        .unwrap()
        .map(|e| {
            let p = e.unwrap().path();
            (p.to_string_lossy().into_owned(), fs::read(&p).unwrap())
        })
        .collect();
    v.sort();
    v
}

#[test]
fn full_pipeline_is_deterministic_and_eval_is_read_only() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), TINY);
    let mut summaries = Vec::new();
    for run in ["a", "b"] {
        let out = tmp.path().join(run);
        for cmd in ["train", "eval", "report"] {
            let o = stage(cmd, &cfg, &out);
            assert!(o.status.success(), "{cmd}: {}", String::from_utf8_lossy(&o.stderr));
            if cmd == "train" {
                let before = checkpoint_digests(&out);
                assert_eq!(before.len(), 2);
                let o = stage("eval", &cfg, &out);
                assert!(o.status.success());
                assert_eq!(checkpoint_digests(&out), before);
            }
        }
        assert!(out.join("traces/g_Lin_seed0.jsonl").exists());
        let table = fs::read_to_string(out.join("table.csv")).unwrap();
        assert!(table.lines().nth(1).unwrap().starts_with("stratum,metric,Lin,TradEm,MF"));
        assert!(!out.join(".setcomp.lock").exists());
        summaries.push(fs::read(out.join("summary.json")).unwrap());
    }
    assert_eq!(summaries[0], summaries[1]);

    let o = setcomp(&["report", "--config", &cfg, "--out", tmp.path().join("a").to_str().unwrap(), "--seed", "7"]);
    assert_eq!(o.status.code(), Some(1), "metrics from another seed must be rejected");
}

#[test]
fn config_errors_exit_with_two() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("out");
    let bad = write_config(tmp.path(), &format!("{TINY}colour = blue\n"));
    let o = stage("train", &bad, &out);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("colour"));
    let missing = tmp.path().join("nope.cfg");
    assert_eq!(stage("train", missing.to_str().unwrap(), &out).status.code(), Some(2));
    assert_eq!(setcomp(&["train"]).status.code(), Some(2));
}

#[test]
fn runtime_failures_exit_with_one() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), TINY);
    let out = tmp.path().join("out");
    let o = stage("eval", &cfg, &out);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("eval"));

    fs::write(out.join(".setcomp.lock"), "1\n").unwrap();
    let o = stage("render-preview", &cfg, &out);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("locked"));
}

#[test]
fn preview_writes_every_label_set() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), TINY);
    let out = tmp.path().join("out");
    let o = stage("render-preview", &cfg, &out);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let pngs = fs::read_dir(out.join("preview"))
        .unwrap()
        .filter(|e| e.as_ref().unwrap().path().extension().is_some_and(|x| x == "png"))
        .count();
    assert_eq!(pngs, 25);
    let labels = fs::read_to_string(out.join("preview/labels.csv")).unwrap();
    assert_eq!(labels.lines().count(), 26);
}
