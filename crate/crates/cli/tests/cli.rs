use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use spml_core::config::RunConfig;
use tempfile::TempDir;

fn spml(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_spml"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("spawn spml")
}

fn ok(out: &Output) {
    assert!(
        out.status.success(),
        "exit {:?}\nstdout:\n{}\nstderr:\n{}",
        out.status.code(),
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn gen(dir: &Path, n: usize, seed: u64) {
    ok(&spml(&[
        "gen-data",
        "--n",
        &n.to_string(),
        "--classes",
        "4",
        "--size",
        "32",
        "--seed",
        &seed.to_string(),
        "--out",
        dir.to_str().unwrap(),
    ]));
}

fn write_config(path: &Path, data: &Path, extra: &str) {
    let text = format!(
        "data.dir = {}\nmodel.input_size = 16\nmodel.channels = 4, 8\nloss.k = 1.5\ntrain.epochs = 3\ntrain.lr = 0.003\n{extra}",
        data.display()
    );
    fs::write(path, text).unwrap();
}

fn best_logged_map(run: &Path) -> f64 {
    let text = fs::read_to_string(run.join("metrics.csv")).unwrap();
    text.lines()
        .skip(1)
        .filter_map(|l| {
            let f: Vec<&str> = l.split(',').collect();
            (f[1] == "val" && f[2] == "mAP").then(|| f[3].parse::<f64>().unwrap())
        })
        .fold(f64::NEG_INFINITY, f64::max)
}

fn exact_map(out: &Output) -> f64 {
    let text = String::from_utf8_lossy(&out.stdout);
    let line = text.lines().find(|l| l.starts_with("mAP (exact)")).expect("exact mAP line");
    line.rsplit(' ').next().unwrap().parse().unwrap()
}

#[test]
fn gen_data_is_deterministic() {
    let tmp = TempDir::new().unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    gen(&a, 100, 7);
    gen(&b, 100, 7);
    for name in ["dataset.cfg", "manifest.csv", "labels.csv", "annotations.csv", "objects.csv"] {
        assert_eq!(fs::read(a.join(name)).unwrap(), fs::read(b.join(name)).unwrap(), "{name}");
    }
    let manifest = fs::read_to_string(a.join("manifest.csv")).unwrap();
    assert_eq!(manifest.lines().count() - 1, 100);
    for line in manifest.lines().skip(1) {
        let image = line.split(',').nth(1).unwrap();
        assert_eq!(fs::read(a.join(image)).unwrap(), fs::read(b.join(image)).unwrap());
    }
    let annotated = fs::read_to_string(a.join("annotations.csv")).unwrap();
    assert_eq!(annotated.lines().count() - 1, 100, "one positive per image");
}

#[test]
fn gen_data_without_out_is_a_usage_error() {
    let out = spml(&["gen-data", "--n", "10"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr(&out).contains("--out"));
}

#[test]
fn train_eval_round_trip() {
    let tmp = TempDir::new().unwrap();
    let data = tmp.path().join("data");
    gen(&data, 60, 1);
    let cfg = tmp.path().join("an.cfg");
    write_config(&cfg, &data, "loss.primary = an\n");
    let run = tmp.path().join("run");
    ok(&spml(&[
        "train",
        cfg.to_str().unwrap(),
        "--run-dir",
        run.to_str().unwrap(),
        "--loss.consistency",
        "none",
    ]));
    for p in ["config.echo", "metrics.csv", "checkpoints/last.bin", "checkpoints/best.bin"] {
        assert!(run.join(p).exists(), "{p} missing");
    }
    let echo = RunConfig::load(&run.join("config.echo")).unwrap();
    assert_eq!(echo.train.epochs, 3);
    assert_eq!(echo.to_text(), fs::read_to_string(run.join("config.echo")).unwrap());

    let best = run.join("checkpoints/best.bin");
    let out = spml(&["eval", best.to_str().unwrap(), "--out", tmp.path().join("eval").to_str().unwrap()]);
    ok(&out);
    assert_eq!(exact_map(&out).to_bits(), best_logged_map(&run).to_bits());
    let report = fs::read_to_string(tmp.path().join("eval/report.csv")).unwrap();
    assert!(report.starts_with("metric,value\nmAP,"));

    let out = spml(&["eval", best.to_str().unwrap(), "--split", "train"]);
    ok(&out);
    assert!(exact_map(&out).is_finite());
}

#[test]
fn run_root_from_environment() {
    let tmp = TempDir::new().unwrap();
    let data = tmp.path().join("data");
    gen(&data, 40, 2);
    let cfg = tmp.path().join("quick.cfg");
    write_config(&cfg, &data, "train.epochs = 1\n");
    let out = Command::new(env!("CARGO_BIN_EXE_spml"))
        .args(["train", cfg.to_str().unwrap()])
        .env("SPML_RUN_ROOT", tmp.path().join("runs"))
        .output()
        .unwrap();
    ok(&out);
    assert!(tmp.path().join("runs/quick/metrics.csv").exists());
}

#[test]
fn full_method_emits_heatmaps_and_masks() {
    let tmp = TempDir::new().unwrap();
    let data = tmp.path().join("data");
    gen(&data, 60, 3);
    let cfg = tmp.path().join("scl.cfg");
    write_config(&cfg, &data, "");
    let run = tmp.path().join("run");
    ok(&spml(&[
        "train",
        cfg.to_str().unwrap(),
        "--run-dir",
        run.to_str().unwrap(),
        "--loss.primary",
        "en",
        "--loss.consistency=scl",
    ]));
    assert!(run.join("heatmaps/store.bin").exists());
    assert!(run.join("masks/masks.csv").exists());
    let out_dir = tmp.path().join("png");
    ok(&spml(&[
        "inspect-heatmaps",
        run.to_str().unwrap(),
        "--samples",
        "0,1",
        "--classes",
        "0,2",
        "--out",
        out_dir.to_str().unwrap(),
    ]));
    for name in ["sample0_class0.png", "sample1_class2.png", "manifest.csv"] {
        assert!(out_dir.join(name).exists(), "{name} missing");
    }
}

#[test]
fn initial_heatmaps_export_white_and_black() {
    let tmp = TempDir::new().unwrap();
    let data = tmp.path().join("data");
    gen(&data, 40, 4);
    let cfg = tmp.path().join("scl.cfg");
    write_config(&cfg, &data, "loss.primary = en\nloss.consistency = scl\n");
    let run = tmp.path().join("run");
    ok(&spml(&[
        "train",
        cfg.to_str().unwrap(),
        "--run-dir",
        run.to_str().unwrap(),
        "--stop-after",
        "0",
    ]));
    let (train, _) = RunConfig::load(&run.join("config.echo")).unwrap().load_splits().unwrap();
    let annotated = train[0].annotation.positives().next().unwrap();
    let out_dir = tmp.path().join("png");
    ok(&spml(&["inspect-heatmaps", run.to_str().unwrap(), "--samples", "0", "--out", out_dir.to_str().unwrap()]));
    let manifest = fs::read_to_string(out_dir.join("manifest.csv")).unwrap();
    for line in manifest.lines().skip(1) {
        let f: Vec<&str> = line.split(',').collect();
        let class: usize = f[1].parse().unwrap();
        let expected = if class == annotated { "1" } else { "0" };
        assert_eq!((f[2], f[3]), (expected, expected), "class {class}");
    }
}

#[test]
fn expected_negatives_without_consistency_is_rejected() {
    let tmp = TempDir::new().unwrap();
    let data = tmp.path().join("data");
    gen(&data, 20, 5);
    let cfg = tmp.path().join("bad.cfg");
    write_config(&cfg, &data, "loss.primary = en\nloss.consistency = none\n");
    let out = spml(&["train", cfg.to_str().unwrap(), "--run-dir", tmp.path().join("run").to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr(&out).contains("loss.primary"));
    assert!(!tmp.path().join("run/metrics.csv").exists());
}

#[test]
fn unknown_override_names_the_key() {
    let tmp = TempDir::new().unwrap();
    let out = spml(&["train", "--run-dir", tmp.path().to_str().unwrap(), "--loss.gama", "1"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr(&out).contains("loss.gama"));
}

#[test]
fn corrupted_manifest_names_the_file() {
    let tmp = TempDir::new().unwrap();
    let data = tmp.path().join("data");
    gen(&data, 20, 6);
    let manifest = fs::read_to_string(data.join("manifest.csv")).unwrap();
    let broken: Vec<String> = manifest
        .lines()
        .enumerate()
        .map(|(i, l)| if i == 1 { format!("{},images/missing.png", l.split(',').next().unwrap()) } else { l.to_string() })
        .collect();
    fs::write(data.join("manifest.csv"), broken.join("\n") + "\n").unwrap();
    let cfg = tmp.path().join("c.cfg");
    write_config(&cfg, &data, "");
    let out = spml(&["train", cfg.to_str().unwrap(), "--run-dir", tmp.path().join("run").to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr(&out).contains("missing.png"), "{}", stderr(&out));
}

#[test]
fn eval_without_checkpoint_fails() {
    let tmp = TempDir::new().unwrap();
    let out = spml(&["eval", tmp.path().join("nope.bin").to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr(&out).contains("nope.bin"));
}
