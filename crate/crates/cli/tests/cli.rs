use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use hat_cli::{dataset_fingerprint, load_toml, RunManifest, MANIFEST_FILE};
use hat_core::data::SynthConfig;
use hat_core::eval::EvalReport;
use hat_core::training::TrainConfig;

fn hat(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_hat"))
        .args(args)
        .env("HAT_LOG_LEVEL", "error")
        .output()
        .expect("run hat")
}

fn configs() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

const SMALL_SYNTH: &str = r#"
n_shoppers = 8
n_style_clusters = 2
n_categories = 3
items_per_category = 12
shared_items_per_category = 2
shopper_items_per_category = 2
shared_item_prob = 0.2
outfit_size_min = 3
outfit_size_max = 3
outfits_per_shopper = 10
embedding_dim = 6
style_noise = 0.2
"#;

const TINY_TRAIN: &str = r#"
epochs = 2
batch_size = 8
lr = 1e-3
weight_decay = 1e-2
seed = 3
max_history = 4
grad_clip = 5.0
split = [0.6, 0.2, 0.2]

[loss]
c_fl = 1.0
c_cl = 1.0
c_am = 0.5
alpha = 0.5
gamma = 2.0
tau = 1.0
margin = 5.0

[model]
d = 8
bottom_layers = 1
bottom_heads = 2
top_layers = 1
top_heads = 2
ff_mult = 2
adapter_hidden = 8
max_history = 4
pool_scale = "d"

[ablation]
disable_cl = false
disable_am = false
fixed_margin = false
"#;

fn write(dir: &Path, name: &str, text: &str) -> String {
    let p = dir.join(name);
    fs::write(&p, text).unwrap();
    p.to_str().unwrap().to_string()
}

fn generate(root: &Path, seed: &str) -> String {
    let cfg = write(root, "synth.toml", SMALL_SYNTH);
    let data = root.join(format!("data{seed}"));
    let o = hat(&[
        "generate",
        "--config",
        &cfg,
        "--out",
        data.to_str().unwrap(),
        "--seed",
        seed,
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    data.to_str().unwrap().to_string()
}

#[test]
fn shipped_configs_parse() {
    let synth: SynthConfig = load_toml(&configs().join("synth_default.toml")).unwrap();
    assert_eq!(synth, SynthConfig::desk_default());
    let train: TrainConfig = load_toml(&configs().join("train_default.toml")).unwrap();
    assert_eq!(train, TrainConfig::default());
    let desk: TrainConfig = load_toml(&configs().join("train_desk.toml")).unwrap();
    desk.validate().unwrap();
}

#[test]
fn missing_key_is_named() {
    let dir = tempfile::tempdir().unwrap();
    let text = SMALL_SYNTH.replace("style_noise = 0.2\n", "");
    let cfg = write(dir.path(), "synth.toml", &text);
    let o = hat(&[
        "generate",
        "--config",
        &cfg,
        "--out",
        dir.path().join("d").to_str().unwrap(),
        "--seed",
        "1",
    ]);
    assert!(!o.status.success());
    let err = stderr(&o);
    assert_eq!(err.trim().lines().count(), 1, "{err}");
    assert!(err.starts_with("error[config]:"), "{err}");
    assert!(err.contains("style_noise"), "{err}");
}

#[test]
fn unknown_key_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let text = format!("{SMALL_SYNTH}colour = 3\n");
    let cfg = write(dir.path(), "synth.toml", &text);
    let o = hat(&[
        "generate",
        "--config",
        &cfg,
        "--out",
        dir.path().join("d").to_str().unwrap(),
        "--seed",
        "1",
    ]);
    assert!(stderr(&o).starts_with("error[config]:"));
    assert!(stderr(&o).contains("colour"));
}

#[test]
fn generate_is_deterministic_and_fingerprinted() {
    let dir = tempfile::tempdir().unwrap();
    let a = generate(dir.path(), "5");
    let cfg = dir.path().join("synth.toml");
    let b = dir.path().join("again");
    let o = hat(&[
        "generate",
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        b.to_str().unwrap(),
        "--seed",
        "5",
    ]);
    assert!(o.status.success());
    for f in ["items.jsonl", "outfits.jsonl", "shoppers.jsonl"] {
        assert_eq!(
            fs::read(Path::new(&a).join(f)).unwrap(),
            fs::read(b.join(f)).unwrap()
        );
    }
    let m = RunManifest::read(&Path::new(&a).join(MANIFEST_FILE)).unwrap();
    assert_eq!(m.command, "generate");
    assert_eq!(m.seed, 5);
    assert_eq!(
        m.dataset_fingerprint.unwrap(),
        dataset_fingerprint(Path::new(&a)).unwrap()
    );
    let c = generate(dir.path(), "6");
    assert_ne!(
        dataset_fingerprint(Path::new(&a)).unwrap(),
        dataset_fingerprint(Path::new(&c)).unwrap()
    );
}

#[test]
fn train_then_eval_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    let data = generate(dir.path(), "2");
    let cfg = write(dir.path(), "train.toml", TINY_TRAIN);
    let run = dir.path().join("run");
    let o = hat(&[
        "train",
        "--config",
        &cfg,
        "--data",
        &data,
        "--out",
        run.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    for f in [
        "checkpoint.bin",
        "steps.jsonl",
        "epochs.jsonl",
        MANIFEST_FILE,
    ] {
        assert!(run.join(f).exists(), "{f}");
    }
    let m = RunManifest::read(&run.join(MANIFEST_FILE)).unwrap();
    assert_eq!(m.seed, 3);
    assert_eq!(m.config["model"]["d"], 8);

    // Same invocation again gives the same bytes.
    let run2 = dir.path().join("run2");
    let o = hat(&[
        "train",
        "--config",
        &cfg,
        "--data",
        &data,
        "--out",
        run2.to_str().unwrap(),
    ]);
    assert!(o.status.success());
    for f in ["checkpoint.bin", "steps.jsonl", "epochs.jsonl"] {
        assert_eq!(
            fs::read(run.join(f)).unwrap(),
            fs::read(run2.join(f)).unwrap(),
            "{f}"
        );
    }

    let ck = run.join("checkpoint.bin");
    let mut reports = Vec::new();
    for task in ["cp_random", "cp_hard", "fitb_random", "fitb_hard"] {
        let out = dir.path().join(format!("eval_{task}"));
        let o = hat(&[
            "eval",
            "--checkpoint",
            ck.to_str().unwrap(),
            "--data",
            &data,
            "--task",
            task,
            "--seed",
            "9",
            "--out",
            out.to_str().unwrap(),
            "--resamples",
            "200",
        ]);
        if task == "cp_hard" && !o.status.success() {
            // A tiny test split may contain no cross-shopper pairs.
            assert!(stderr(&o).starts_with("error[eval]:"), "{}", stderr(&o));
            continue;
        }
        assert!(o.status.success(), "{task}: {}", stderr(&o));
        let text = fs::read_to_string(out.join("report.jsonl")).unwrap();
        assert_eq!(text.lines().count(), 1);
        let r: EvalReport = serde_json::from_str(text.trim()).unwrap();
        assert_eq!(r.task.name(), task);
        assert_eq!(r.resamples, 200);
        assert_eq!(r.seed, 9);
        assert!(r.lower <= r.upper);
        reports.push((task, text));
    }
    assert!(reports.len() >= 3);

    // Re-running eval reproduces the report byte for byte.
    let out = dir.path().join("eval_again");
    let o = hat(&[
        "eval",
        "--checkpoint",
        ck.to_str().unwrap(),
        "--data",
        &data,
        "--task",
        "cp_random",
        "--seed",
        "9",
        "--out",
        out.to_str().unwrap(),
        "--resamples",
        "200",
    ]);
    assert!(o.status.success());
    assert_eq!(
        fs::read_to_string(out.join("report.jsonl")).unwrap(),
        reports[0].1
    );
}

#[test]
fn unknown_task_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let o = hat(&[
        "eval",
        "--checkpoint",
        "nope.bin",
        "--data",
        dir.path().to_str().unwrap(),
        "--task",
        "cp",
        "--seed",
        "0",
        "--out",
        dir.path().to_str().unwrap(),
    ]);
    assert!(!o.status.success());
    let err = stderr(&o);
    assert_eq!(err.trim().lines().count(), 1);
    assert!(err.starts_with("error[usage]:"), "{err}");
    for t in ["cp_random", "cp_hard", "fitb_random", "fitb_hard"] {
        assert!(err.contains(t), "{err}");
    }
}

#[test]
fn missing_data_is_an_io_error() {
    let dir = tempfile::tempdir().unwrap();
    let o = hat(&[
        "train",
        "--config",
        configs().join("train_desk.toml").to_str().unwrap(),
        "--data",
        dir.path().join("absent").to_str().unwrap(),
        "--out",
        dir.path().join("o").to_str().unwrap(),
    ]);
    assert!(!o.status.success());
    assert!(stderr(&o).starts_with("error[io]:"), "{}", stderr(&o));
}

#[test]
fn bad_flags_are_single_line_usage_errors() {
    let o = hat(&["train", "--bogus"]);
    assert_eq!(o.status.code(), Some(2));
    let err = stderr(&o);
    assert_eq!(err.trim().lines().count(), 1, "{err}");
    assert!(err.starts_with("error[usage]:"));
}

#[test]
fn ablate_writes_seven_rows() {
    let dir = tempfile::tempdir().unwrap();
    let data = generate(dir.path(), "4");
    let cfg = write(
        dir.path(),
        "train.toml",
        &TINY_TRAIN.replace("epochs = 2", "epochs = 1"),
    );
    let out = dir.path().join("abl");
    let o = hat(&[
        "ablate",
        "--config",
        &cfg,
        "--data",
        &data,
        "--out",
        out.to_str().unwrap(),
        "--resamples",
        "50",
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let text = fs::read_to_string(out.join("ablation.csv")).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines.len(), 8);
    assert!(lines[0].starts_with("variant,dataset_fingerprint,seed,max_history"));
    let fp = dataset_fingerprint(Path::new(&data)).unwrap();
    assert!(lines[1..].iter().all(|l| l.contains(&fp)));
    let m = RunManifest::read(&out.join(MANIFEST_FILE)).unwrap();
    assert_eq!(m.config["resamples"], 50);
}
