use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tempfile::TempDir;

const TINY_DATA: &[&str] = &[
    "--set",
    "dataset.n_locations=256",
    "--set",
    "dataset.timestamps=2",
    "--set",
    "dataset.harmonics=8",
    "--set",
    "dataset.height=8",
    "--set",
    "dataset.width=8",
];

const TINY_RUN: &[&str] = &[
    "--set",
    "train.epochs=2",
    "--set",
    "train.batch_size=32",
    "--set",
    "train.hidden=16",
    "--set",
    "train.embed_dim=8",
    "--set",
    "train.proj_dim=8",
    "--set",
    "train.queue_capacity=64",
    "--set",
    "eval.probe_epochs=2",
];

fn geossl(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_geossl"))
        .args(args)
        .env_remove("GEOSSL_THREADS")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = geossl(args);
    assert!(
        out.status.success(),
        "geossl {args:?} failed:\n{}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn fail(args: &[&str]) -> String {
    let out = geossl(args);
    assert!(
        !out.status.success(),
        "geossl {args:?} unexpectedly succeeded"
    );
    String::from_utf8(out.stderr).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn tiny_dataset(tmp: &TempDir, name: &str, extra: &[&str]) -> PathBuf {
    let dir = tmp.path().join(name);
    let mut args = vec!["generate", "--out", s(&dir)];
    args.extend_from_slice(TINY_DATA);
    args.extend_from_slice(extra);
    ok(&args);
    dir
}

fn only_run_dir(runs: &Path) -> PathBuf {
    let dirs: Vec<PathBuf> = fs::read_dir(runs)
        .unwrap()
        .map(|e| e.unwrap().path())
        .collect();
    assert_eq!(dirs.len(), 1, "{dirs:?}");
    let name = dirs[0].file_name().unwrap().to_str().unwrap().to_string();
    let parts: Vec<&str> = name.split('_').collect();
    assert_eq!(parts.len(), 3, "{name}");
    assert_eq!(parts[0], "run");
    assert_eq!(parts[1].len(), 15);
    assert!(parts[2].len() == 8 && parts[2].chars().all(|c| c.is_ascii_hexdigit()));
    dirs[0].clone()
}

fn manifest(dir: &Path) -> serde_json::Value {
    serde_json::from_str(&fs::read_to_string(dir.join("manifest.json")).unwrap()).unwrap()
}

fn dir_bytes(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut v: Vec<(String, Vec<u8>)> = fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let e = e.unwrap();
            (
                e.file_name().into_string().unwrap(),
                fs::read(e.path()).unwrap(),
            )
        })
        .collect();
    v.sort();
    v
}

#[test]
fn generate_default_config() {
    let tmp = TempDir::new().unwrap();
    let dir = tmp.path().join("d");
    let out = ok(&["generate", "--out", s(&dir)]);
    assert!(out.contains("4096"), "{out}");
    let m = manifest(&dir);
    assert_eq!(m["n_locations"], 4096);
    assert_eq!(m["config"]["n_locations"], 4096);
}

#[test]
fn same_seed_gives_identical_directories() {
    let tmp = TempDir::new().unwrap();
    let a = tiny_dataset(&tmp, "a", &["--seed", "7"]);
    let b = tiny_dataset(&tmp, "b", &["--seed", "7"]);
    let c = tiny_dataset(&tmp, "c", &["--seed", "8"]);
    assert_eq!(manifest(&a)["config"]["seed"], 7);
    assert_eq!(dir_bytes(&a), dir_bytes(&b));
    assert_ne!(dir_bytes(&a), dir_bytes(&c));
}

#[test]
fn unknown_config_key_is_named() {
    let tmp = TempDir::new().unwrap();
    let cfg = tmp.path().join("cfg.toml");
    fs::write(&cfg, "[train]\nlearning_rate = 0.1\n").unwrap();
    let out = tmp.path().join("d");
    let err = fail(&["generate", "--config", s(&cfg), "--out", s(&out)]);
    assert!(err.contains("learning_rate"), "{err}");
    assert!(!out.exists());

    let err = fail(&["generate", "--set", "optimizer.lr=1", "--out", s(&out)]);
    assert!(err.contains("optimizer"), "{err}");
}

#[test]
fn invalid_values_fail_before_any_work() {
    let tmp = TempDir::new().unwrap();
    let data = tiny_dataset(&tmp, "d", &[]);
    let runs = tmp.path().join("runs");
    let err = fail(&[
        "pretrain",
        "--data",
        s(&data),
        "--out",
        s(&runs),
        "--set",
        "train.lr=-1",
    ]);
    assert!(err.contains("lr"), "{err}");
    let err = fail(&[
        "pretrain",
        "--data",
        s(&data),
        "--out",
        s(&runs),
        "--set",
        "loss.alpha=2",
    ]);
    assert!(err.contains("alpha"), "{err}");
    assert!(!runs.exists());
}

#[test]
fn generate_refuses_to_clobber() {
    let tmp = TempDir::new().unwrap();
    let dir = tiny_dataset(&tmp, "d", &[]);
    let mut args = vec!["generate", "--out", s(&dir)];
    args.extend_from_slice(TINY_DATA);
    let err = fail(&args);
    assert!(err.contains("--force"), "{err}");

    args.push("--force");
    ok(&args);

    fs::write(dir.join("notes.txt"), "keep me").unwrap();
    let err = fail(&args);
    assert!(err.contains("notes.txt"), "{err}");
    assert!(dir.join("notes.txt").exists());
}

#[test]
fn pretrain_writes_a_georank_run() {
    let tmp = TempDir::new().unwrap();
    let data = tiny_dataset(&tmp, "d", &[]);
    let before = dir_bytes(&data);
    let runs = tmp.path().join("runs");
    let mut args = vec!["pretrain", "--data", s(&data), "--out", s(&runs)];
    args.extend_from_slice(TINY_RUN);
    let out = ok(&args);
    assert!(out.contains("knn"), "{out}");

    let run = only_run_dir(&runs);
    let cfg: toml::Table = fs::read_to_string(run.join("config.toml"))
        .unwrap()
        .parse()
        .unwrap();
    assert_eq!(cfg["loss"]["geo_kind"].as_str(), Some("rank"));
    assert_eq!(cfg["loss"]["alpha"].as_float(), Some(0.48));
    assert_eq!(cfg["loss"]["d_max"].as_float(), Some(2500.0));
    assert_eq!(cfg["train"]["epochs"].as_integer(), Some(2));
    assert_eq!(cfg["dataset"]["path"].as_str(), Some(s(&data)));

    let csv = fs::read_to_string(run.join("metrics.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines.len(), 3, "{csv}");
    assert!(lines[0].starts_with("run_id,axis,grid_point,seed"));
    assert!(fs::metadata(run.join("checkpoint.bin")).unwrap().len() > 0);
    assert_eq!(dir_bytes(&data), before, "input dataset was modified");

    // The stored config reproduces the run.
    let rerun = tmp.path().join("rerun");
    ok(&[
        "pretrain",
        "--config",
        s(&run.join("config.toml")),
        "--out",
        s(&rerun),
    ]);
    let again = only_run_dir(&rerun);
    assert_eq!(
        fs::read(run.join("checkpoint.bin")).unwrap(),
        fs::read(again.join("checkpoint.bin")).unwrap()
    );
}

#[test]
fn evaluate_random_encoder_on_uninformative_data_is_chance() {
    let tmp = TempDir::new().unwrap();
    let data = tmp.path().join("chance");
    ok(&[
        "generate",
        "--out",
        s(&data),
        "--set",
        "dataset.timestamps=1",
        "--set",
        "dataset.harmonics=8",
        "--set",
        "dataset.class_amplitude=0",
        "--set",
        "dataset.region_amplitude=0",
        "--set",
        "dataset.field_amplitude=0",
        "--set",
        "dataset.texture_amplitude=0",
    ]);
    let runs = tmp.path().join("runs");
    ok(&[
        "evaluate",
        "--data",
        s(&data),
        "--out",
        s(&runs),
        "--protocol",
        "knn",
    ]);
    let run = only_run_dir(&runs);
    let report: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(run.join("evaluation.json")).unwrap()).unwrap();
    let acc = report["knn_acc_macro"].as_f64().unwrap();
    assert!(
        (acc - 0.2).abs() < 0.06,
        "k-NN accuracy {acc} is not chance"
    );
    assert!(report["linear_acc_macro"].is_null());
    assert!(report["spearman_geo"].is_null());
}

#[test]
fn evaluate_checkpoint_and_export() {
    let tmp = TempDir::new().unwrap();
    let data = tiny_dataset(&tmp, "d", &[]);
    let runs = tmp.path().join("runs");
    let mut args = vec!["pretrain", "--data", s(&data), "--out", s(&runs)];
    args.extend_from_slice(TINY_RUN);
    ok(&args);
    let ckpt = only_run_dir(&runs).join("checkpoint.bin");

    let evals = tmp.path().join("evals");
    let export = tmp.path().join("emb.bin");
    ok(&[
        "evaluate",
        "--data",
        s(&data),
        "--checkpoint",
        s(&ckpt),
        "--out",
        s(&evals),
        "--export",
        s(&export),
    ]);
    let report: serde_json::Value = serde_json::from_str(
        &fs::read_to_string(only_run_dir(&evals).join("evaluation.json")).unwrap(),
    )
    .unwrap();
    for key in ["knn_acc_macro", "linear_acc_macro"] {
        let v = report[key].as_f64().unwrap();
        assert!((0.0..=1.0).contains(&v), "{key} = {v}");
    }
    let meta: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(export.with_extension("json")).unwrap()).unwrap();
    assert_eq!(meta["rows"], 512);
    assert_eq!(meta["dim"], 8);
    assert_eq!(fs::metadata(&export).unwrap().len(), 512 * 8 * 4);

    // A checkpoint trained on other patch sizes is rejected.
    let other = tiny_dataset(
        &tmp,
        "other",
        &["--set", "dataset.height=12", "--set", "dataset.width=12"],
    );
    let err = fail(&[
        "evaluate",
        "--data",
        s(&other),
        "--checkpoint",
        s(&ckpt),
        "--out",
        s(&evals),
    ]);
    assert!(err.contains("encoder expects"), "{err}");
}

#[test]
fn ablate_temporal_gives_two_points() {
    let tmp = TempDir::new().unwrap();
    let data = tiny_dataset(&tmp, "d", &[]);
    let runs = tmp.path().join("runs");
    let mut args = vec![
        "ablate",
        "--data",
        s(&data),
        "--out",
        s(&runs),
        "--axis",
        "temporal",
        "--seeds",
        "1",
        "--threads",
        "2",
    ];
    args.extend_from_slice(TINY_RUN);
    ok(&args);
    let csv = only_run_dir(&runs).join("ablation_temporal.csv");
    let text = fs::read_to_string(csv).unwrap();
    let points: Vec<String> = text
        .lines()
        .skip(1)
        .map(|l| l.split(',').nth(2).unwrap().to_string())
        .collect();
    assert_eq!(points, ["on", "on", "off", "off"]);
    assert_eq!(text.matches(",summary,").count(), 2);
}

#[test]
fn unknown_axis_and_bad_grid_point_fail() {
    let tmp = TempDir::new().unwrap();
    let data = tiny_dataset(&tmp, "d", &[]);
    let runs = tmp.path().join("runs");
    let err = fail(&[
        "ablate",
        "--data",
        s(&data),
        "--out",
        s(&runs),
        "--axis",
        "colour",
    ]);
    assert!(err.contains("colour"), "{err}");
    let err = fail(&[
        "ablate",
        "--data",
        s(&data),
        "--out",
        s(&runs),
        "--axis",
        "temporal",
        "--grid",
        "sometimes",
    ]);
    assert!(err.contains("sometimes"), "{err}");
    assert!(!runs.exists());
}

#[test]
fn report_single_run_gives_one_series() {
    let tmp = TempDir::new().unwrap();
    let data = tiny_dataset(&tmp, "d", &[]);
    let runs = tmp.path().join("runs");
    let mut args = vec!["pretrain", "--data", s(&data), "--out", s(&runs)];
    args.extend_from_slice(TINY_RUN);
    ok(&args);
    let metrics = only_run_dir(&runs).join("metrics.csv");
    let rep = tmp.path().join("rep");
    let out = ok(&["report", s(&metrics), "--out", s(&rep)]);
    assert!(out.contains("pretrain"), "{out}");
    let svgs: Vec<PathBuf> = fs::read_dir(&rep)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.extension().is_some_and(|e| e == "svg"))
        .collect();
    assert_eq!(svgs.len(), 1);
    let svg = fs::read_to_string(&svgs[0]).unwrap();
    assert_eq!(svg.matches("<polyline").count(), 1);
    assert_eq!(svg.matches("<circle").count(), 1);
    assert!(rep.join("summary.txt").exists());

    let err = fail(&["report", s(&metrics), "--out", s(&rep)]);
    assert!(err.contains("--force"), "{err}");
    ok(&["report", s(&metrics), "--out", s(&rep), "--force"]);
}

#[test]
fn report_cardinality_four_points_five_seeds() {
    let tmp = TempDir::new().unwrap();
    let data = tiny_dataset(&tmp, "d", &[]);
    let runs = tmp.path().join("runs");
    let mut args = vec![
        "ablate",
        "--data",
        s(&data),
        "--out",
        s(&runs),
        "--axis",
        "cardinality",
    ];
    args.extend_from_slice(TINY_RUN);
    // The smallest subset holds 26 locations.
    args.extend_from_slice(&["--set", "train.batch_size=16"]);
    ok(&args);
    let csv = only_run_dir(&runs).join("ablation_cardinality.csv");
    let rep = tmp.path().join("rep");
    let out = ok(&["report", s(&csv), "--out", s(&rep)]);
    let svg = fs::read_to_string(rep.join("cardinality.svg")).unwrap();
    assert_eq!(svg.matches("<polyline").count(), 1);
    assert_eq!(svg.matches("<circle").count(), 4);
    // One error bar path per point.
    assert_eq!(svg.matches(r#"fill="none"/>"#).count(), 4);
    for point in ["0.125", "0.25", "0.5", "1"] {
        assert!(svg.contains(&format!(">{point}</text>")), "{point}");
    }
    let summary = fs::read_to_string(rep.join("summary.txt")).unwrap();
    assert_eq!(
        summary,
        out.lines()
            .skip(1)
            .map(|l| format!("{l}\n"))
            .collect::<String>()
    );
    let runs_col: Vec<&str> = summary
        .lines()
        .skip(2)
        .map(|l| l.split_whitespace().nth(2).unwrap())
        .collect();
    assert_eq!(runs_col, ["5", "5", "5", "5"]);
}

#[test]
fn report_rejects_empty_and_malformed_csv() {
    let tmp = TempDir::new().unwrap();
    let empty = tmp.path().join("empty.csv");
    fs::write(&empty, "").unwrap();
    let rep = tmp.path().join("rep");
    fail(&["report", s(&empty), "--out", s(&rep)]);
    assert!(!rep.exists());

    let bad = tmp.path().join("bad.csv");
    fs::write(&bad, "run_id,axis\nx,y\n").unwrap();
    let err = fail(&["report", s(&bad), "--out", s(&rep)]);
    assert!(err.contains("bad.csv"), "{err}");
    assert!(!rep.exists());
}

#[test]
fn help_lists_every_key_with_default() {
    let top = ok(&["--help"]);
    let sub = ok(&["pretrain", "--help"]);
    for text in [&top, &sub] {
        for line in [
            "dataset.path = \"dataset\"",
            "dataset.n_locations = 4096",
            "loss.alpha = 0.48",
            "loss.d_max = 2500.0",
            "train.lr = 0.02",
            "train.pipeline_file = \"\"",
            "eval.k = 10",
            "ablation.seeds = 5",
        ] {
            assert!(text.contains(line), "`{line}` missing from help");
        }
    }
}

#[test]
fn threads_env_is_validated() {
    let out = Command::new(env!("CARGO_BIN_EXE_geossl"))
        .args(["report", "missing.csv"])
        .env("GEOSSL_THREADS", "many")
        .output()
        .unwrap();
    assert!(!out.status.success());
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("many") && err.contains("threads"), "{err}");
}

#[test]
fn pipeline_file_replaces_the_preset() {
    let tmp = TempDir::new().unwrap();
    let data = tiny_dataset(&tmp, "d", &[]);
    let pipe = tmp.path().join("pipe.toml");
    fs::write(&pipe, "[[spec]]\np = 0.5\ntechnique = \"hflip\"\n").unwrap();
    let runs = tmp.path().join("runs");
    let pipe_set = format!("train.pipeline_file={}", s(&pipe));
    let mut args = vec![
        "pretrain",
        "--data",
        s(&data),
        "--out",
        s(&runs),
        "--set",
        &pipe_set,
    ];
    args.extend_from_slice(TINY_RUN);
    ok(&args);
    let cfg: toml::Table = fs::read_to_string(only_run_dir(&runs).join("config.toml"))
        .unwrap()
        .parse()
        .unwrap();
    let spec = cfg["train"]["pipeline"]["spec"].as_array().unwrap();
    assert_eq!(spec.len(), 1);

    fs::write(&pipe, "[[spec]]\np = 1.5\ntechnique = \"hflip\"\n").unwrap();
    let err = fail(&[
        "pretrain",
        "--data",
        s(&data),
        "--out",
        s(&runs),
        "--set",
        &pipe_set,
    ]);
    assert!(err.contains("probability"), "{err}");
}
