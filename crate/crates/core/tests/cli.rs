use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tslm::cli::{GenDataManifest, RunManifest};
use tslm::params::ParamGroup;
use tslm::train::freeze_report;

fn tslm(args: &[&str], envs: &[(&str, &Path)]) -> Output {
    let mut c = Command::new(env!("CARGO_BIN_EXE_tslm"));
    c.args(args).env_remove("TSLM_OUT").env("RUST_LOG", "warn");
    for (k, v) in envs {
        c.env(k, v);
    }
    c.output().expect("binary runs")
}

fn ok(out: &Output) {
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn gen_data_splits_and_sidecar() {
    let dir = tempfile::tempdir().unwrap();
    let out = tslm(&["gen-data", "trend", "--count", "1000", "--seed", "7", "--out", s(dir.path())], &[]);
    ok(&out);
    let m: GenDataManifest = serde_json::from_slice(&std::fs::read(dir.path().join("trend.stats.json")).unwrap()).unwrap();
    let n: Vec<usize> = ["train", "val", "test"].iter().map(|k| m.stats.splits[*k].n).collect();
    assert_eq!(n, vec![800, 100, 100]);
    assert_eq!(m.stats.splits["train"].labels.values().sum::<usize>(), 800);
    assert_eq!(m.sha256, tslm::cli::blob_sha256(&std::fs::read(dir.path().join("trend.jsonl")).unwrap()));
}

#[test]
fn simulation_corpus_has_two_hundred_elements() {
    let dir = tempfile::tempdir().unwrap();
    ok(&tslm(&["gen-data", "simulation", "--num-series", "3", "--length", "1000", "--out", s(dir.path())], &[]));
    let corpus = tslm::data::read_jsonl(&dir.path().join("simulation.jsonl")).unwrap();
    assert_eq!(corpus.len(), 200);
    assert!(corpus.iter().all(|p| p.chunks.len() == 3 && p.chunks.iter().all(|c| c.values.len() == 1000)));
}

#[test]
fn gen_data_is_byte_identical_and_honours_the_env_dir() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    ok(&tslm(&["gen-data", "har", "--count", "40", "--seed", "3", "--out", s(a.path())], &[]));
    ok(&tslm(&["gen-data", "har", "--count", "40", "--seed", "3"], &[("TSLM_OUT", b.path())]));
    let read = |d: &Path| std::fs::read(d.join("har.jsonl")).unwrap();
    assert_eq!(read(a.path()), read(b.path()));
}

#[test]
fn exit_codes_for_bad_inputs() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(tslm(&["gen-data", "weather"], &[]).status.code(), Some(2));

    let cfg = dir.path().join("run.toml");
    std::fs::write(&cfg, "[[stages]]\nname = \"s1\"\ndatasets = [\"nowhere.jsonl\"]\n").unwrap();
    assert_eq!(tslm(&["train", "--config", s(&cfg)], &[]).status.code(), Some(3));
    std::fs::write(&cfg, "[[stages]]\nname = \"s1\"\n").unwrap();
    assert_eq!(tslm(&["train", "--config", s(&cfg)], &[]).status.code(), Some(2));

    ok(&tslm(&["gen-data", "trend", "--count", "20", "--out", s(dir.path())], &[]));
    let ckpt = dir.path().join("bad.ckpt");
    std::fs::write(&ckpt, b"GGUF\x00\x00\x00\x00 definitely not ours").unwrap();
    let data = dir.path().join("trend.jsonl");
    assert_eq!(tslm(&["eval", "--checkpoint", s(&ckpt), "--data", s(&data)], &[]).status.code(), Some(4));
    let missing = dir.path().join("missing.ckpt");
    assert_eq!(tslm(&["eval", "--checkpoint", s(&missing), "--data", s(&data)], &[]).status.code(), Some(3));
}

const TINY_MODEL: &str = r#"
[model.backbone]
d_model = 16
depth = 1
heads = 2
max_context = 512
lora_rank = 2

[model.patch]
embed_dim = 8

[model.softprompt]
encoder_layers = 1
encoder_heads = 2

[model.crossattn]
n_latent = 4
d_k = 8
resampler_layers = 1
resampler_heads = 2
"#;

fn write_run(dir: &Path, variant: &str) -> PathBuf {
    let cfg = format!(
        "seed = 5\noutput_dir = \"run-{variant}\"\n\n[model]\nvariant = \"{variant}\"\n{TINY_MODEL}\n\
         [[stages]]\nname = \"stage1\"\ndatasets = [\"caption.jsonl\"]\n[stages.optim]\nepochs = 1\nbatch_size = 4\n\n\
         [[stages]]\nname = \"stage2\"\ndatasets = [\"trend.jsonl\"]\n[stages.optim]\nepochs = 2\nbatch_size = 4\n"
    );
    let path = dir.join(format!("{variant}.toml"));
    std::fs::write(&path, cfg).unwrap();
    path
}

#[test]
fn train_then_eval_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(&tslm(&["gen-data", "trend", "--count", "30", "--seed", "1", "--out", s(d)], &[]));
    ok(&tslm(&["gen-data", "caption", "--count", "20", "--seed", "2", "--out", s(d)], &[]));

    let cfg = write_run(d, "flamingo");
    ok(&tslm(&["train", "--config", s(&cfg)], &[]));
    let run = d.join("run-flamingo");
    let m: RunManifest = serde_json::from_slice(&std::fs::read(run.join("manifest.json")).unwrap()).unwrap();
    let names: Vec<&str> = m.stages.iter().map(|s| s.name.as_str()).collect();
    assert_eq!(names, ["stage1", "stage2"]);
    assert_eq!(m.stages[1].epochs_run, 2);
    assert_eq!(m.checkpoint, run.join("stage2.ckpt"));
    assert_eq!(m.final_val_loss, m.stages[1].best_val_loss);
    assert_eq!(m.data.len(), 2);
    assert_eq!(m.data[1].sha256, tslm::cli::blob_sha256(&std::fs::read(d.join("trend.jsonl")).unwrap()));
    assert_eq!(m.config_sha256.len(), 64);
    let metrics = std::fs::read_to_string(run.join("stage2.metrics.csv")).unwrap();
    assert!(metrics.starts_with("epoch,split,loss,lr,grad_norm,peak_mem_bytes\n"));

    let (model, _) = tslm::checkpoint::load_checkpoint(&m.checkpoint).unwrap();
    let census = freeze_report(&model);
    assert!(census.entries.iter().filter(|e| e.group == ParamGroup::Backbone).all(|e| !e.trainable));
    assert!(census.entries.iter().any(|e| e.name.ends_with(".gate") && e.trainable));

    // a second run from the same config lands on the same numbers
    let again = d.join("again");
    ok(&tslm(&["train", "--config", s(&cfg), "--out", s(&again)], &[]));
    let m2: RunManifest = serde_json::from_slice(&std::fs::read(again.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(m2.final_val_loss.to_bits(), m.final_val_loss.to_bits());

    let ev = d.join("eval");
    let data = d.join("trend.jsonl");
    let args = ["eval", "--checkpoint", s(&m.checkpoint), "--data", s(&data), "--family", "trend", "--max-new-tokens", "24", "--out", s(&ev)];
    ok(&tslm(&args, &[]));
    let csv = std::fs::read_to_string(ev.join("eval_test.csv")).unwrap();
    assert!(csv.starts_with(tslm::eval::EvalResult::CSV_HEADER));
    assert_eq!(csv.lines().count(), 3 + 2);
    assert_eq!(std::fs::read_to_string(ev.join("predictions_test.jsonl")).unwrap().lines().count(), 3);
}

#[test]
fn profile_memory_writes_records_and_table() {
    let dir = tempfile::tempdir().unwrap();
    let out = tslm(
        &["profile-memory", "--backbones", "toy", "--lengths", "10,100", "--series", "1,2", "--out", s(dir.path())],
        &[],
    );
    ok(&out);
    let lines = std::fs::read_to_string(dir.path().join("memory.jsonl")).unwrap();
    assert_eq!(lines.lines().count(), 2 * 2 * 2);
    let table = std::fs::read_to_string(dir.path().join("memory_table.csv")).unwrap();
    assert_eq!(table.lines().next().unwrap(), "L-N,softprompt/toy,flamingo/toy");
    assert_eq!(String::from_utf8_lossy(&out.stdout), table);
}
