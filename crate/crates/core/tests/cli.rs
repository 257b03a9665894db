use std::path::Path;
use std::process::{Command, Output};

const BIN: &str = env!("CARGO_BIN_EXE_stylevar");

fn stylevar(args: &[&str], cwd: &Path) -> Output {
    Command::new(BIN)
        .args(args)
        .current_dir(cwd)
        .env_remove("STYLEVAR_DATA_DIR")
        .env_remove("STYLEVAR_CKPT_DIR")
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

/// Tiny model and tokenizer so sampling runs in milliseconds.
const TINY: &str = r#"{
  "schedule": [1, 2],
  "tokenizer": {"dim": 4, "vocab": 8, "image_size": 8, "fit_triplets": 4},
  "model": {"embed_dim": 8, "heads": 2, "layers": 1, "ffn_mult": 2, "adapter_rank": 2},
  "data": {"n": 6}
}"#;

#[test]
fn panw_table_prints_published_weights() {
    let dir = tempfile::tempdir().unwrap();
    let o = stylevar(&["panw-table"], dir.path());
    assert!(o.status.success(), "{}", stderr(&o));
    let text = stdout(&o);
    let weights: Vec<f64> = text
        .lines()
        .skip(1)
        .take(10)
        .map(|l| l.split('\t').nth(3).unwrap().parse().unwrap())
        .collect();
    let table = [3.37, 1.28, 0.72, 0.48, 0.35, 0.27, 0.18, 0.13, 0.09, 0.07];
    for (w, t) in weights.iter().zip(table) {
        assert!((w - t).abs() <= 0.005, "{w} vs {t}");
    }
    assert!(text.lines().last().unwrap().contains("680"));
}

#[test]
fn panw_table_custom_schedule_and_alpha() {
    let dir = tempfile::tempdir().unwrap();
    let o = stylevar(&["panw-table", "--alpha", "0", "--schedule", "1,2"], dir.path());
    assert!(o.status.success());
    let rows: Vec<String> = stdout(&o).lines().map(String::from).collect();
    assert_eq!(rows.len(), 4);
    assert!(rows[1].contains("20.0000") && rows[2].contains("20.0000"), "{rows:?}");
}

#[test]
fn sample_is_byte_identical_for_a_seed() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("tiny.json"), TINY).unwrap();
    let run = |seed: &str, out: &str| {
        let o = stylevar(&["--config", "tiny.json", "--seed", seed, "sample", "--index", "2", "--out", out], dir.path());
        assert!(o.status.success(), "{}", stderr(&o));
        std::fs::read(dir.path().join(out)).unwrap()
    };
    let a = run("5", "a.png");
    let b = run("5", "b.png");
    let c = run("6", "c.ppm");
    assert_eq!(a, b);
    assert!(c.starts_with(b"P6"));
    assert!(a.starts_with(b"\x89PNG"));
}

#[test]
fn gen_data_then_eval_writes_reports() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("tiny.json"), TINY).unwrap();
    let o = stylevar(&["--config", "tiny.json", "gen-data", "--out", "d"], dir.path());
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(dir.path().join("d/manifest.json").exists());
    let o = stylevar(
        &["--config", "tiny.json", "eval", "--method", "adain", "--data", "d", "--split", "all", "--out", "ev"],
        dir.path(),
    );
    assert!(o.status.success(), "{}", stderr(&o));
    let csv = std::fs::read_to_string(dir.path().join("ev/adain_pixel_metrics.csv")).unwrap();
    assert_eq!(csv.lines().count(), 1 + 6, "{csv}");
    assert!(dir.path().join("ev/adain_pixel_metrics.json").exists());
}

#[test]
fn data_dir_comes_from_the_environment() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("tiny.json"), TINY).unwrap();
    let o = Command::new(BIN)
        .args(["--config", "tiny.json", "gen-data", "--n", "3"])
        .current_dir(dir.path())
        .env("STYLEVAR_DATA_DIR", "envdata")
        .output()
        .unwrap();
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(dir.path().join("envdata/manifest.json").exists());
}

#[test]
fn missing_config_reports_path_and_fails() {
    let dir = tempfile::tempdir().unwrap();
    let o = stylevar(&["--config", "nope.json", "panw-table"], dir.path());
    assert_eq!(o.status.code(), Some(1));
    let err = stderr(&o);
    assert!(err.starts_with("error kind=io"), "{err}");
    assert!(err.contains("nope.json"));
}

#[test]
fn unknown_config_key_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("bad.json"), r#"{"sft": {"epochz": 3}}"#).unwrap();
    let o = stylevar(&["--config", "bad.json", "panw-table"], dir.path());
    assert_eq!(o.status.code(), Some(1));
    let err = stderr(&o);
    assert!(err.contains("kind=json") && err.contains("epochz"), "{err}");
}

#[test]
fn usage_errors_exit_two() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(stylevar(&["bogus"], dir.path()).status.code(), Some(2));
    assert_eq!(stylevar(&["grpo"], dir.path()).status.code(), Some(2));
}

#[test]
fn help_lists_config_keys() {
    let dir = tempfile::tempdir().unwrap();
    let o = stylevar(&["--help"], dir.path());
    assert!(o.status.success());
    let text = stdout(&o);
    for key in ["grpo.panw_alpha", "sampler.top_p", "sft.lr_schedule", "STYLEVAR_CKPT_DIR"] {
        assert!(text.contains(key), "missing {key}");
    }
}

#[test]
fn corrupt_checkpoint_is_reported() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("x.ckpt"), b"SVAR garbage").unwrap();
    let o = stylevar(&["sample", "--checkpoint", "x.ckpt"], dir.path());
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).starts_with("error kind=checkpoint"), "{}", stderr(&o));
}
