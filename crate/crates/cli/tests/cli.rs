use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use maskmamba_cli::checkpoint::Checkpoint;
use maskmamba_cli::commands::ablate::Suite;

const TINY: &str = r#"
seed = 3

[model]
n_layers = 2
hidden = 16
codebook_size = 8
n_classes = 4
grid_h = 4
grid_w = 4

[train]
base_lr = 0.2
batch = 4
steps = 60
warmup_epochs = 1

[decode]
steps = 4

[data.synthetic]
images = 8
seed = 1
patch = 2
channels = 3

[output]
checkpoint_every = 20
log_every = 0
"#;

fn bin(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_maskmamba")).args(args).output().unwrap()
}

fn ok(args: &[&str]) -> String {
    let out = bin(args);
    assert!(out.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn write_config(dir: &Path, text: &str) -> PathBuf {
    let p = dir.join("run.toml");
    std::fs::write(&p, text).unwrap();
    p
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn train_resume_matches_uninterrupted_run() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), TINY);
    let (full, split) = (dir.path().join("full"), dir.path().join("split"));
    ok(&["train", "--config", s(&cfg), "--out", s(&full)]);
    ok(&["train", "--config", s(&cfg), "--out", s(&split), "--stop-after", "25"]);
    let ck = split.join("checkpoint.mmck");
    assert_eq!(Checkpoint::<f32>::load(&ck).unwrap().step, 25);
    ok(&["train", "--resume", s(&ck), "--out", s(&split)]);
    let a = Checkpoint::<f32>::load(&full.join("checkpoint.mmck")).unwrap();
    let b = Checkpoint::<f32>::load(&ck).unwrap();
    assert_eq!(a.step, 60);
    assert_eq!(a.params, b.params);
    assert_eq!(a.optimizer, b.optimizer);
    assert_eq!(a.rng, b.rng);
    for d in [&full, &split] {
        let rows = std::fs::read_to_string(d.join("metrics.csv")).unwrap();
        let mut lines = rows.lines();
        assert_eq!(lines.next(), Some("step,loss,lr,grad_norm,wall_ms"));
        assert_eq!(lines.count(), 60);
    }
}

#[test]
fn empty_dataset_fails_cleanly() {
    let dir = tempfile::tempdir().unwrap();
    ok(&["codebook", "random", "--k", "8", "--patch", "2", "--out", s(&dir.path().join("cb.mmcb"))]);
    std::fs::write(dir.path().join("index.tsv"), "# nothing here\n").unwrap();
    let text = TINY.replace(
        "[data.synthetic]\nimages = 8\nseed = 1\npatch = 2\nchannels = 3",
        "[data]\nindex = \"index.tsv\"\ncodebook = \"cb.mmcb\"",
    );
    let cfg = write_config(dir.path(), &text);
    let out_dir = dir.path().join("out");
    let out = bin(&["train", "--config", s(&cfg), "--out", s(&out_dir)]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("empty"));
    assert!(!out_dir.join("checkpoint.mmck").exists());
    assert!(!out_dir.join(".maskmamba.lock").exists());
}

#[test]
fn unknown_config_keys_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), &TINY.replace("hidden = 16", "hiden = 16"));
    let out = bin(&["train", "--config", s(&cfg), "--out", s(&dir.path().join("o"))]);
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("hiden") && err.contains("line"), "{err}");
}

#[test]
fn generate_flags_and_determinism() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), TINY);
    let run = dir.path().join("run");
    ok(&["train", "--config", s(&cfg), "--out", s(&run)]);
    let ck = run.join("checkpoint.mmck");
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    let log = ok(&[
        "generate",
        "--checkpoint",
        s(&ck),
        "--class",
        "2",
        "--seed",
        "7",
        "--out",
        s(&a),
        "--trace",
        s(&dir.path().join("t.csv")),
    ]);
    assert!(log.contains("forward passes: 8"), "{log}");
    ok(&["generate", "--checkpoint", s(&ck), "--class", "2", "--seed", "7", "--out", s(&b)]);
    assert_eq!(std::fs::read(a.join("sample_000.ppm")).unwrap(), std::fs::read(b.join("sample_000.ppm")).unwrap());
    let trace = std::fs::read_to_string(dir.path().join("t.csv")).unwrap();
    assert_eq!(trace.lines().count(), 1 + 4);

    let log = ok(&["generate", "--checkpoint", s(&ck), "--class", "1", "--cfg", "1.0", "--out", s(&a)]);
    assert!(log.contains("forward passes: 4"), "{log}");
    let log = ok(&["generate", "--checkpoint", s(&ck), "--class", "1", "--steps", "1", "--cfg", "1", "--out", s(&a)]);
    assert!(log.contains("forward passes: 1"), "{log}");

    let out = bin(&["generate", "--checkpoint", s(&ck), "--class", "9", "--out", s(&a)]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("0..=3"));

    let info = ok(&["inspect", s(&ck)]);
    assert!(info.contains("step         60") && info.contains("bimamba_v2 transformer"), "{info}");
}

#[test]
fn text_conditioned_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let text = TINY
        .replace("n_classes = 4", "cond_kind = \"text\"\ntext_len = 3\ntext_dim = 5")
        .replace("steps = 60", "steps = 5");
    let cfg = write_config(dir.path(), &text);
    let run = dir.path().join("run");
    ok(&["train", "--config", s(&cfg), "--out", s(&run)]);
    let log = ok(&[
        "generate",
        "--checkpoint",
        s(&run.join("checkpoint.mmck")),
        "--caption",
        "synthetic image 1",
        "--samples",
        "2",
        "--out",
        s(&dir.path().join("g")),
    ]);
    assert!(log.contains("wrote 2 image(s)"));
}

#[test]
fn bench_row_accounting_and_resolutions() {
    let dir = tempfile::tempdir().unwrap();
    let csv = dir.path().join("bench.csv");
    ok(&[
        "bench",
        "--kinds",
        "transformer,bimamba,bimamba_v2",
        "--L",
        "64,256,1024,4096",
        "--width",
        "16",
        "--out",
        s(&csv),
    ]);
    let text = std::fs::read_to_string(&csv).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some("kind,L,batch,C,repeats,median_ms,mean_ms,p95_ms,peak_bytes,flops"));
    assert_eq!(lines.count(), 12);
    let summary = std::fs::read_to_string(dir.path().join("bench.summary.txt")).unwrap();
    assert_eq!(summary.matches("time exponent").count(), 3);

    let csv2 = dir.path().join("res.csv");
    ok(&["bench", "--kinds", "bimamba_v2", "--resolutions", "256,512", "--width", "8", "--out", s(&csv2)]);
    let text = std::fs::read_to_string(&csv2).unwrap();
    let lens: Vec<&str> = text.lines().skip(1).map(|l| l.split(',').nth(1).unwrap()).collect();
    assert_eq!(lens, ["256", "1024"]);

    let bad = bin(&["bench", "--kinds", "bimamba_v2", "--L", "256,64", "--out", s(&csv2)]);
    assert_eq!(bad.status.code(), Some(2));
}

#[test]
fn ablation_suites_have_the_expected_rows() {
    let dir = tempfile::tempdir().unwrap();
    let text =
        TINY.replace("steps = 60", "steps = 3").replace("[decode]\nsteps = 4", "[decode]\nsteps = 4\ncfg_scale = 1.0");
    let cfg = write_config(dir.path(), &text);
    let report = dir.path().join("report.txt");
    let log = ok(&["ablate", "--suite", "schemes", "--config", s(&cfg), "--out", s(&report)]);
    for name in ["group_v1", "group_v2", "serial_v1", "serial_v2"] {
        assert!(log.contains(name), "{name} missing from\n{log}");
    }
    assert_eq!(std::fs::read_to_string(&report).unwrap().lines().count(), 2 + 4);
    let bad = bin(&["ablate", "--suite", "nope", "--config", s(&cfg)]);
    assert_eq!(bad.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&bad.stderr).contains("cfg_sweep"));
    assert_eq!(Suite::ALL.len(), 5);
}

#[test]
fn synth_folder_trains_through_the_index() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    ok(&[
        "synth",
        "--out",
        s(&data),
        "--images",
        "4",
        "--classes",
        "4",
        "--k",
        "8",
        "--grid",
        "4",
        "--patch",
        "2",
        "--channels",
        "1",
    ]);
    let text = TINY
        .replace(
            "[data.synthetic]\nimages = 8\nseed = 1\npatch = 2\nchannels = 3",
            "[data]\nindex = \"data/index.tsv\"\ncodebook = \"data/codebook.mmcb\"",
        )
        .replace("steps = 60", "steps = 4");
    let cfg = write_config(dir.path(), &text);
    let run = dir.path().join("run");
    ok(&["train", "--config", s(&cfg), "--out", s(&run)]);
    ok(&[
        "generate",
        "--checkpoint",
        s(&run.join("checkpoint.mmck")),
        "--class",
        "0",
        "--out",
        s(&dir.path().join("g")),
    ]);
    assert!(dir.path().join("g/sample_000.pgm").exists());
    let out = bin(&[
        "codebook",
        "kmeans",
        "--index",
        s(&data.join("index.tsv")),
        "--k",
        "4",
        "--patch",
        "2",
        "--out",
        s(&dir.path().join("km.mmcb")),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn held_lock_blocks_a_second_run() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), TINY);
    let run = dir.path().join("run");
    std::fs::create_dir_all(&run).unwrap();
    std::fs::write(run.join(".maskmamba.lock"), "").unwrap();
    let out = bin(&["train", "--config", s(&cfg), "--out", s(&run)]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("locked"));
}
