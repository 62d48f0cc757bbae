//! End-to-end CLI exercise: prepare → train → generate → evaluate on the
//! fixture corpus with desk-scale model dimensions, plus exit-code checks.

mod common;

use std::path::Path;
use std::process::Command;

fn dgen() -> Command {
    Command::new(env!("CARGO_BIN_EXE_dgen"))
}

fn ok(cmd: &mut Command) {
    let out = cmd.output().unwrap();
    assert!(
        out.status.success(),
        "command failed\nstdout: {}\nstderr: {}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
}

fn prepare(raw: &Path, emb: &Path, out: &Path) {
    ok(dgen().args([
        "prepare",
        "--input",
        raw.to_str().unwrap(),
        "--output",
        out.to_str().unwrap(),
        "--embeddings",
        emb.to_str().unwrap(),
        "--seed",
        "7",
        "--embed-dim",
        "8",
    ]));
}

#[test]
fn full_pipeline_runs_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    let raw = dir.path().join("raw");
    common::write_fixture_corpus(&raw);
    let emb = dir.path().join("vectors.txt");
    common::write_fixture_embeddings(&emb, 8);
    let prepared = dir.path().join("prepared");
    prepare(&raw, &emb, &prepared);

    let config = dir.path().join("train.conf");
    std::fs::write(
        &config,
        "batch_size=8\ninitial_lr=0.5\ntotal_steps=30\ndropout=0.1\nseed=5\nvariant=full\n",
    )
    .unwrap();
    let run = dir.path().join("run");
    ok(dgen().args([
        "train",
        "--config",
        config.to_str().unwrap(),
        "--data",
        prepared.to_str().unwrap(),
        "--out",
        run.to_str().unwrap(),
        "--enc-hidden",
        "4",
        "--dec-hidden",
        "8",
        "--max-sentences",
        "6",
        "--max-words",
        "12",
    ]));
    assert!(run.join("checkpoint.bin").exists());
    let ckpt_manifest = std::fs::read_to_string(run.join("checkpoint_manifest.txt")).unwrap();
    assert!(ckpt_manifest.contains("validation_perplexity:"));

    let generated = dir.path().join("generated.jsonl");
    ok(dgen().args([
        "generate",
        "--checkpoint",
        run.join("checkpoint.bin").to_str().unwrap(),
        "--data",
        prepared.join("test.jsonl").to_str().unwrap(),
        "--beam",
        "10",
        "--max-len",
        "6",
        "--out",
        generated.to_str().unwrap(),
        "--dump-attention",
    ]));
    let gen_text = std::fs::read_to_string(&generated).unwrap();
    let test_questions: std::collections::BTreeSet<String> =
        std::fs::read_to_string(prepared.join("test.jsonl"))
            .unwrap()
            .lines()
            .map(|l| {
                let v: serde_json::Value = serde_json::from_str(l).unwrap();
                let id = v["id"].as_str().unwrap();
                id.rsplit_once("#d").unwrap().0.to_string()
            })
            .collect();
    let mut seen = std::collections::BTreeSet::new();
    for line in gen_text.lines() {
        let v: serde_json::Value = serde_json::from_str(line).unwrap();
        seen.insert(v["id"].as_str().unwrap().to_string());
        assert_eq!(v["distractors"].as_array().unwrap().len(), 3);
        assert_eq!(v["log_likelihoods"].as_array().unwrap().len(), 3);
        assert_eq!(v["diversity_flags"].as_array().unwrap().len(), 3);
    }
    assert_eq!(seen, test_questions, "one record per test question");
    let attn_text =
        std::fs::read_to_string(generated.with_extension("attention.jsonl")).unwrap();
    for line in attn_text.lines() {
        let v: serde_json::Value = serde_json::from_str(line).unwrap();
        let gamma: Vec<f64> = v["gamma"]
            .as_array()
            .unwrap()
            .iter()
            .map(|x| x.as_f64().unwrap())
            .collect();
        let sum: f64 = gamma.iter().sum();
        assert!((sum - 1.0).abs() < 1e-9);
        let tau = v["tau"].as_f64().unwrap();
        assert!(tau > 0.0 && tau < 1.0);
    }

    let report = dir.path().join("report.txt");
    ok(dgen().args([
        "evaluate",
        "--hyp",
        generated.to_str().unwrap(),
        "--ref",
        prepared.join("test.jsonl").to_str().unwrap(),
        "--out",
        report.to_str().unwrap(),
    ]));
    let text = std::fs::read_to_string(&report).unwrap();
    assert!(text.contains("1st Distractor"));
    assert!(text.contains("Avg. Performance"));
    assert!(text.contains("BLEU1") && text.contains("ROUGEL"));
    let json: serde_json::Value =
        serde_json::from_slice(&std::fs::read(report.with_extension("json")).unwrap()).unwrap();
    assert_eq!(json["rows"].as_array().unwrap().len(), 4);
}

#[test]
fn ablation_writes_combined_report() {
    let dir = tempfile::tempdir().unwrap();
    let raw = dir.path().join("raw");
    common::write_fixture_corpus(&raw);
    let emb = dir.path().join("vectors.txt");
    common::write_fixture_embeddings(&emb, 8);
    let prepared = dir.path().join("prepared");
    prepare(&raw, &emb, &prepared);

    let config = dir.path().join("train.conf");
    std::fs::write(
        &config,
        "batch_size=8\ninitial_lr=0.5\ntotal_steps=8\ndropout=0.0\nseed=5\n",
    )
    .unwrap();
    let out = dir.path().join("ablation");
    ok(dgen().args([
        "ablation",
        "--config",
        config.to_str().unwrap(),
        "--data",
        prepared.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
        "--beam",
        "5",
        "--max-len",
        "5",
        "--enc-hidden",
        "3",
        "--dec-hidden",
        "6",
        "--max-sentences",
        "6",
        "--max-words",
        "12",
    ]));
    let report = std::fs::read_to_string(out.join("ablation_report.txt")).unwrap();
    for variant in ["seq2seq", "hred", "full"] {
        assert!(report.contains(variant), "missing {variant} in report");
        assert!(out.join(variant).join("checkpoint.bin").exists());
        assert!(out.join(variant).join("generated.jsonl").exists());
    }
}

#[test]
fn bad_inputs_use_distinct_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    // unknown config key: configuration error, exit code 2
    let config = dir.path().join("bad.conf");
    std::fs::write(&config, "not_a_key=1\n").unwrap();
    let prepared = dir.path().join("nonexistent");
    let status = dgen()
        .args([
            "train",
            "--config",
            config.to_str().unwrap(),
            "--data",
            prepared.to_str().unwrap(),
            "--out",
            dir.path().join("out").to_str().unwrap(),
        ])
        .output()
        .unwrap();
    assert_eq!(status.status.code(), Some(2));

    // malformed hypothesis id against real references: contract error, exit 1
    let raw = dir.path().join("raw");
    common::write_fixture_corpus(&raw);
    let emb = dir.path().join("vectors.txt");
    common::write_fixture_embeddings(&emb, 8);
    let prep = dir.path().join("prepared");
    prepare(&raw, &emb, &prep);
    let hyp = dir.path().join("hyp.jsonl");
    std::fs::write(
        &hyp,
        "{\"id\":\"missing#q0\",\"distractors\":[\"a\"],\"log_likelihoods\":[-1.0],\"diversity_flags\":[true]}\n",
    )
    .unwrap();
    let status = dgen()
        .args([
            "evaluate",
            "--hyp",
            hyp.to_str().unwrap(),
            "--ref",
            prep.join("test.jsonl").to_str().unwrap(),
            "--out",
            dir.path().join("r.txt").to_str().unwrap(),
        ])
        .output()
        .unwrap();
    assert_eq!(status.status.code(), Some(1));

    // missing subcommand arguments: clap reports usage with exit code 2
    let status = dgen().args(["generate"]).output().unwrap();
    assert_eq!(status.status.code(), Some(2));
}

#[test]
fn data_root_resolves_relative_inputs() {
    let dir = tempfile::tempdir().unwrap();
    let raw = dir.path().join("raw");
    common::write_fixture_corpus(&raw);
    let emb = dir.path().join("vectors.txt");
    common::write_fixture_embeddings(&emb, 8);
    let out = dir.path().join("prepared");
    let result = dgen()
        .env("DG_DATA_ROOT", dir.path())
        .args([
            "prepare",
            "--input",
            "raw",
            "--output",
            out.to_str().unwrap(),
            "--embeddings",
            "vectors.txt",
            "--seed",
            "7",
            "--embed-dim",
            "8",
        ])
        .output()
        .unwrap();
    assert!(
        result.status.success(),
        "stderr: {}",
        String::from_utf8_lossy(&result.stderr)
    );
    assert!(out.join("train.jsonl").exists());
}
