use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const TINY: &[&str] = &[
    "synth.n_members=30",
    "synth.n_jobs=20",
    "synth.n_clusters=2",
    "synth.p_in=0.35",
    "synth.p_uu=0.2",
    "model.d_model=16",
    "model.d_ff=32",
    "model.context=96",
    "ego.fanout=2",
    "split.min_degree=3",
    "train.stage0_epochs=1",
    "train.warmup_epochs=1",
    "train.epochs=2",
    "eval.n_g=1",
    "eval.n_g_valid=1",
    r#"train.tasks=["link:ui","skill"]"#,
];

fn jobgraph(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_jobgraph"))
        .current_dir(dir)
        .args(args)
        .output()
        .expect("binary runs")
}

fn with_tiny<'a>(mut args: Vec<&'a str>) -> Vec<&'a str> {
    for s in TINY {
        args.push("--set");
        args.push(s);
    }
    args
}

fn ok(o: &Output) -> String {
    assert!(
        o.status.success(),
        "exit {:?}\nstdout: {}\nstderr: {}",
        o.status.code(),
        String::from_utf8_lossy(&o.stdout),
        String::from_utf8_lossy(&o.stderr)
    );
    String::from_utf8(o.stdout.clone()).unwrap()
}

#[test]
fn unknown_flags_and_subcommands_exit_with_usage_error() {
    let d = tempfile::tempdir().unwrap();
    assert_eq!(jobgraph(d.path(), &["gen-data", "--out", "g", "--frobnicate"]).status.code(), Some(2));
    assert_eq!(jobgraph(d.path(), &["frobnicate"]).status.code(), Some(2));
}

#[test]
fn bad_override_keys_are_rejected() {
    let d = tempfile::tempdir().unwrap();
    let o = jobgraph(d.path(), &["gen-data", "--out", "g.jsonl", "--set", "synth.no_such_key=3"]);
    assert!(!o.status.success());
    assert!(!d.path().join("g.jsonl").exists());
}

#[test]
fn config_file_and_overrides_combine() {
    let d = tempfile::tempdir().unwrap();
    fs::write(d.path().join("run.toml"), "[synth]\nn_members = 14\nn_jobs = 9\n").unwrap();
    let o = jobgraph(
        d.path(),
        &["gen-data", "--config", "run.toml", "--set", "synth.n_jobs=11", "--out", "g.jsonl"],
    );
    ok(&o);
    let text = fs::read_to_string(d.path().join("g.jsonl")).unwrap();
    assert!(text.contains("\"id\":25"), "14 members and 11 jobs give ids 1..=25");
    assert!(!text.contains("\"id\":26"));
    let side: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(d.path().join("g.jsonl.clusters.json")).unwrap()).unwrap();
    assert_eq!(side["member_clusters"].as_array().unwrap().len(), 14);
}

#[test]
fn dump_prompts_prints_json_lines() {
    let d = tempfile::tempdir().unwrap();
    ok(&jobgraph(d.path(), &with_tiny(vec!["gen-data", "--out", "g.jsonl"])));
    let out = ok(&jobgraph(
        d.path(),
        &with_tiny(vec![
            "dump-prompts", "--graph", "g.jsonl", "--node", "1", "--kind", "node-task", "--task", "skill",
            "--count", "2",
        ]),
    ));
    let lines: Vec<serde_json::Value> = out.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(lines.len(), 2);
    assert_eq!(lines[0]["center"], 1);
    assert_eq!(lines[0]["tokens"][1], "<member_1>");
}

#[test]
fn grad_check_passes_at_64_bit_and_refuses_32() {
    let d = tempfile::tempdir().unwrap();
    let out = ok(&jobgraph(d.path(), &["grad-check", "--precision", "64", "--per-tensor", "2"]));
    assert!(out.contains("max relative error"));
    assert!(!jobgraph(d.path(), &["grad-check", "--precision", "32"]).status.success());
    // an absurd threshold makes the same check fail
    let strict = jobgraph(d.path(), &["grad-check", "--per-tensor", "2", "--tolerance", "1e-30"]);
    assert_eq!(strict.status.code(), Some(1));
}

#[test]
fn train_evaluate_predict_export_pipeline() {
    let d = tempfile::tempdir().unwrap();
    let p = d.path();
    ok(&jobgraph(p, &with_tiny(vec!["gen-data", "--out", "g.jsonl"])));
    ok(&jobgraph(
        p,
        &with_tiny(vec!["pretrain", "--graph", "g.jsonl", "--out", "pre.ck", "--log", "pre.jsonl"]),
    ));
    let log = fs::read_to_string(p.join("pre.jsonl")).unwrap();
    let phases: Vec<serde_json::Value> = log.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(phases.first().unwrap()["phase"], "stage0");
    assert_eq!(phases.last().unwrap()["phase"], "warmup");

    ok(&jobgraph(
        p,
        &["finetune", "--graph", "g.jsonl", "--init", "pre.ck", "--out", "ft.ck", "--plot", "loss.svg"],
    ));
    assert!(fs::read_to_string(p.join("loss.svg")).unwrap().starts_with("<svg"));

    let report: serde_json::Value = serde_json::from_str(&ok(&jobgraph(
        p,
        &["evaluate", "--checkpoint", "ft.ck", "--graph", "g.jsonl", "--split", "valid"],
    )))
    .unwrap();
    let r20 = report["metrics"]["recall@20"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&r20));

    let skill: serde_json::Value = serde_json::from_str(&ok(&jobgraph(
        p,
        &["evaluate", "--checkpoint", "ft.ck", "--graph", "g.jsonl", "--task", "skill"],
    )))
    .unwrap();
    assert!(skill["metrics"]["accuracy"].as_f64().is_some());

    let pred: serde_json::Value = serde_json::from_str(&ok(&jobgraph(
        p,
        &["predict", "--checkpoint", "ft.ck", "--graph", "g.jsonl", "--node", "2", "--top", "5"],
    )))
    .unwrap();
    let ranked = pred["ranked"].as_array().unwrap();
    assert_eq!(ranked.len(), 5);
    assert!(ranked.iter().all(|n| n.as_u64().unwrap() > 30), "jobs follow the 30 members");

    ok(&jobgraph(p, &["export-embeddings", "--checkpoint", "ft.ck", "--out", "z.tsv"]));
    let tsv = fs::read_to_string(p.join("z.tsv")).unwrap();
    let rows: Vec<&str> = tsv.lines().collect();
    assert_eq!(rows.len(), 50);
    assert!(rows[0].starts_with("1\tmember\t"));
    assert_eq!(rows[49].split('\t').count(), 2 + 16);
}
