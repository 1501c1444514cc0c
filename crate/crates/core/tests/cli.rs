use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use fflab::cli::RunConfig;
use fflab::trainer::AblationRun;

fn fflab(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_fflab"))
        .args(args)
        .env("FFLAB_THREADS", "1")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = fflab(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn code(args: &[&str]) -> i32 {
    fflab(args).status.code().expect("exit code")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn snapshot(dir: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut files = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                files.insert(p.strip_prefix(dir).unwrap().to_path_buf(), fs::read(&p).unwrap());
            }
        }
    }
    files
}

fn small_data(root: &Path) -> PathBuf {
    let data = root.join("data");
    ok(&["gen-data", "--out", s(&data), "--count", "3", "--size", "64", "--seed", "1"]);
    data
}

fn quick_train(data: &Path, out: &Path, extra: &[&str]) {
    let mut args = vec![
        "train", "--data", s(data), "--out", s(out), "--steps", "3", "--batch-size", "2", "--seed", "5",
    ];
    args.extend_from_slice(extra);
    ok(&args);
}

#[test]
fn gen_data_twice_gives_identical_directories() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path().join("d");
    ok(&["gen-data", "--out", s(&dir), "--count", "8", "--seed", "1", "--size", "64"]);
    let first = snapshot(&dir);
    fs::remove_dir_all(&dir).unwrap();
    ok(&["gen-data", "--out", s(&dir), "--count", "8", "--seed", "1", "--size", "64"]);
    assert_eq!(first, snapshot(&dir));
    assert_eq!(first.keys().filter(|k| k.starts_with("images")).count(), 8);
    assert!(first.contains_key(Path::new("config.json")));
}

#[test]
fn usage_errors_exit_two() {
    assert_eq!(code(&["train", "--bogus"]), 2);
    assert_eq!(code(&["nonsense"]), 2);
    assert_eq!(code(&["train", "--data", "x", "--out", "y", "--fusion", "sum"]), 2);
    assert_eq!(code(&["erf", "--checkpoint", "c", "--out", "o", "--branch", "4"]), 2);
    assert_eq!(code(&["analyze", "--input-shape", "1,3,512"]), 2);
    let out = Command::new(env!("CARGO_BIN_EXE_fflab"))
        .args(["analyze"])
        .env("FFLAB_THREADS", "zero")
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn help_documents_exit_codes() {
    let help = ok(&["--help"]);
    for line in ["3  invalid configuration", "4  missing", "6  bad checkpoint", "FFLAB_THREADS"] {
        assert!(help.contains(line), "{line}");
    }
}

#[test]
fn error_classes_have_distinct_exit_codes() {
    let tmp = tempfile::tempdir().unwrap();
    let data = small_data(tmp.path());
    assert_eq!(code(&["eval", "--data", "/nonexistent/fflab", "--checkpoint", "x"]), 4);

    let bad_cfg = tmp.path().join("bad.json");
    fs::write(&bad_cfg, r#"{"fusion": "concat", "nonsense": 1}"#).unwrap();
    assert_eq!(code(&["analyze", "--config", s(&bad_cfg)]), 3);
    assert_eq!(code(&["train", "--data", s(&data), "--out", s(&tmp.path().join("t")), "--crop", "128"]), 3);

    let ck = tmp.path().join("bad.ffck");
    fs::write(&ck, b"FFCK garbage").unwrap();
    assert_eq!(code(&["eval", "--data", s(&data), "--checkpoint", s(&ck)]), 6);

    assert_eq!(code(&["analyze", "--input-shape", "1,3,100,100"]), 8);
}

#[test]
fn config_is_echoed_before_the_work_starts() {
    let tmp = tempfile::tempdir().unwrap();
    let data = small_data(tmp.path());
    let ck = tmp.path().join("bad.ffck");
    fs::write(&ck, b"not a checkpoint").unwrap();
    let out = tmp.path().join("density");
    let image = data.join("images/scene_0000.pgm");
    let args = ["export-density", "--checkpoint", s(&ck), "--image", s(&image), "--out", s(&out)];
    assert_eq!(code(&args), 6);
    match RunConfig::load(&out.join("config.json")).unwrap() {
        RunConfig::ExportDensity { checkpoint, .. } => assert_eq!(checkpoint, ck),
        other => panic!("{other:?}"),
    }
}

#[test]
fn train_writes_artifacts_and_replays_bitwise() {
    let tmp = tempfile::tempdir().unwrap();
    let data = small_data(tmp.path());
    let run = tmp.path().join("run");
    quick_train(&data, &run, &["--fusion", "add"]);
    for f in ["config.json", "loss.csv", "model.ffck", "run.json", "metrics.json", "metrics.txt"] {
        assert!(run.join(f).exists(), "{f}");
    }
    let csv = fs::read_to_string(run.join("loss.csv")).unwrap();
    assert!(csv.starts_with("step,count,ot,variation,total\n"));
    assert_eq!(csv.lines().count(), 4);
    let summary: AblationRun = serde_json::from_str(&fs::read_to_string(run.join("run.json")).unwrap()).unwrap();
    assert_eq!(summary.fusion, "add");
    assert_eq!(summary.density_shape, [1, 1, 8, 8]);

    let again = tmp.path().join("again");
    ok(&["replay", s(&run.join("config.json")), "--out", s(&again)]);
    assert_eq!(fs::read(run.join("model.ffck")).unwrap(), fs::read(again.join("model.ffck")).unwrap());
    assert_eq!(fs::read(run.join("loss.csv")).unwrap(), fs::read(again.join("loss.csv")).unwrap());

    let eval_dir = tmp.path().join("eval");
    let text = ok(&["eval", "--data", s(&data), "--checkpoint", s(&run.join("model.ffck")), "--out", s(&eval_dir)]);
    assert!(text.contains("MAE"));
    assert_eq!(
        fs::read(run.join("metrics.json")).unwrap(),
        fs::read(eval_dir.join("metrics.json")).unwrap()
    );
}

#[test]
fn report_contrasts_runs() {
    let tmp = tempfile::tempdir().unwrap();
    let data = small_data(tmp.path());
    let (a, b) = (tmp.path().join("ftm"), tmp.path().join("no_ftm"));
    quick_train(&data, &a, &[]);
    quick_train(&data, &b, &["--no-ftm"]);
    let out = tmp.path().join("report");
    let table = ok(&["report", s(&a), s(&b), "--out", s(&out)]);
    assert!(table.contains("ftm") && table.contains("no_ftm"));
    let curves = fs::read_to_string(out.join("curves.csv")).unwrap();
    assert!(curves.starts_with("step,ftm,no_ftm\n"));
    assert_eq!(curves.lines().count(), 4);
}

#[test]
fn analysis_subcommands_write_outputs() {
    let tmp = tempfile::tempdir().unwrap();
    let data = small_data(tmp.path());
    let run = tmp.path().join("run");
    quick_train(&data, &run, &[]);
    let ck = run.join("model.ffck");
    let image = data.join("images/scene_0000.pgm");

    let erf = tmp.path().join("erf");
    ok(&["erf", "--checkpoint", s(&ck), "--out", s(&erf), "--probes", "2", "--size", "64", "--branch", "2"]);
    assert!(erf.join("erf_branch2.pgm").exists() && erf.join("erf.json").exists());

    let heat = tmp.path().join("heat");
    let text = ok(&[
        "heatmap",
        "--checkpoint",
        s(&ck),
        "--image",
        s(&image),
        "--annotation",
        s(&data.join("annotations/scene_0000.csv")),
        "--out",
        s(&heat),
    ]);
    assert!(text.contains("correlation"));
    for b in 1..=3 {
        assert!(heat.join(format!("heatmap_branch{b}.pgm")).exists());
    }

    let dens = tmp.path().join("dens");
    ok(&["export-density", "--checkpoint", s(&ck), "--image", s(&image), "--out", s(&dens)]);
    let (count, cells) = fflab::analysis::read_density_csv(&dens.join("density.csv")).unwrap();
    assert_eq!(cells.len(), 64);
    assert!((count - cells.iter().map(|c| c.2).sum::<f64>()).abs() < 1e-9);

    let an = tmp.path().join("an");
    let text = ok(&["analyze", "--input-shape", "1,1,64,64", "--out", s(&an)]);
    assert!(text.contains("FLOPs") && an.join("report.json").exists());
}
