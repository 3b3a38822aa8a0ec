use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn cli(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_cyclegan-ad")).args(args).env("RUST_LOG", "warn").output().expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = cli(args);
    assert!(out.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

const TINY: &str = "epochs = 1\nseed = 2\ncheckpoint_every = 1\nresolution = 16\nbase_width = 4\n\
n_residual_blocks = 1\ndisc_widths = [4, 8]\n";

#[test]
fn version_names_artifact_and_checkpoint_format() {
    let v = ok(&["--version"]);
    assert!(v.contains(env!("CARGO_PKG_VERSION")), "{v}");
    assert!(v.contains("checkpoint format"), "{v}");
}

#[test]
fn synth_train_score_calibrate_evaluate_report() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    let data = root.join("data");
    ok(&["synth", "--resolution", "16", "--n-normal", "6", "--n-abnormal", "4", "--seed", "3", "--out", p(&data)]);
    let count = |sub: &str| fs::read_dir(data.join(sub)).unwrap().count();
    assert_eq!((count("normal"), count("abnormal"), count("masks")), (6, 4, 4));
    assert!(data.join("synthetic.toml").is_file());

    let cfg = root.join("tiny.toml");
    fs::write(&cfg, TINY).unwrap();
    let run = root.join("runs/run_0");
    let printed = ok(&["train", "--config", p(&cfg), "--data", p(&data), "--out", p(&run), "--augmentation", "none"]);
    let ckpt = run.join("ckpt/final.ckpt");
    assert!(printed.contains("final.ckpt") && ckpt.is_file());
    assert!(run.join("split.json").is_file());
    // Header plus max(6 - 2, 4 - 2) steps.
    assert_eq!(fs::read_to_string(run.join("log.csv")).unwrap().lines().count(), 1 + 4);

    let scores = run.join("scores.csv");
    ok(&[
        "score", "--checkpoint", p(&ckpt), "--data", p(&data), "--split", p(&run.join("split.json")),
        "--out", p(&scores), "--extractor-seed", "1",
    ]);
    let (meta, records) = cyclegan_ad::scoring::read_scores(&scores).unwrap();
    assert_eq!(records.len(), 4);
    assert!(records.iter().all(|r| r.fid.is_some()));
    assert_eq!(meta.checkpoint_sha256, cyclegan_ad::model::file_sha256(&ckpt).unwrap());

    let zfn = ok(&["calibrate", "--scores", p(&scores), "--policy", "zfn"]);
    assert!(zfn.contains("fn=0") && zfn.contains("recall=1.0000"), "{zfn}");
    let acc = ok(&["calibrate", "--scores", p(&scores), "--policy", "acc", "--metric", "fid"]);
    assert!(acc.starts_with("threshold="), "{acc}");

    let table = ok(&["evaluate", "--scores", p(&scores), "--out", p(&root.join("eval.json")), "--dataset", "toy"]);
    assert!(table.contains("SSE") && table.contains("FID"), "{table}");
    assert!(root.join("eval.json").is_file());

    let report_dir = root.join("report");
    ok(&["report", "--runs", p(&root.join("runs")), "--out", p(&report_dir), "--dataset", "toy"]);
    let report = cyclegan_ad::calibrate::MetricsReport::read(&report_dir.join("report.json")).unwrap();
    assert_eq!(report.runs.len(), 1);
    assert_eq!(report.seeds, vec![Some(0)]);
    assert!(report_dir.join("report.txt").is_file());
    assert!(report_dir.join("run_0/hist_sse.png").is_file());

    let image = fs::read_dir(data.join("abnormal")).unwrap().next().unwrap().unwrap().path();
    let demo = root.join("demo");
    ok(&["reconstruct", "--checkpoint", p(&ckpt), "--image", p(&image), "--out", p(&demo)]);
    assert!(fs::read_dir(&demo).unwrap().any(|e| e.unwrap().file_name().to_string_lossy().ends_with("_triptych.png")));
}

#[test]
fn exit_codes_separate_configuration_and_data_errors() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.toml");
    fs::write(&bad, "epochz = 3\n").unwrap();
    let recipe = dir.path().join("synthetic.toml");
    let spec = cyclegan_ad::dataset::SyntheticSpec::blobs(16, 4, 4, 0);
    fs::write(&recipe, toml::to_string(&spec).unwrap()).unwrap();
    let out = cli(&["train", "--config", p(&bad), "--synthetic", p(&recipe), "--out", p(dir.path())]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("epochz"));

    let missing = dir.path().join("missing.csv");
    let out = cli(&["calibrate", "--scores", p(&missing), "--policy", "zfn"]);
    assert_eq!(out.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&out.stderr).contains("missing.csv"));

    let out = cli(&["calibrate", "--scores", p(&missing), "--policy", "sometimes"]);
    assert_eq!(out.status.code(), Some(2));
}
