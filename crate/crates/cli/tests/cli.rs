use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn se2match(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_se2match")).args(args).output().unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn write_config(dir: &Path) -> String {
    let path = dir.join("small.cfg");
    fs::write(
        &path,
        "# synthetic data\nworking_resolution = none\nnormalize_radius = 16\nwavelet_size = 21\nn_theta = 8\n\
         patch = 41\ngrid_k = 11\ngrid_l = 11\ngrid_m = 8\nfolds = 3\ntemplates = A,C\nlosses = lin\n",
    )
    .unwrap();
    path.to_str().unwrap().to_string()
}

#[test]
fn synth_then_kfold_succeeds() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    let o = se2match(&["-o", data.to_str().unwrap(), "synth", "disk", "-n", "9"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let cfg = write_config(dir.path());
    let out = dir.path().join("out");
    let manifest = data.join("manifest.csv");
    let o = se2match(&["--config", &cfg, "-o", out.to_str().unwrap(), "kfold", manifest.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    for f in ["report.txt", "report.csv", "outcomes.csv", "detections.csv", "timings.csv", "folds.csv", "config.txt"] {
        assert!(out.join(f).is_file(), "missing {f}");
    }
    let report = fs::read_to_string(out.join("report.txt")).unwrap();
    assert!(report.contains("A_se2") && report.contains("R/8"), "{report}");
}

#[test]
fn usage_errors_exit_with_one() {
    let o = se2match(&["frobnicate"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("Usage"), "{}", stderr(&o));
    assert_eq!(se2match(&["kfold"]).status.code(), Some(1));
    assert_eq!(se2match(&["--set", "nonsense", "synth", "disk"]).status.code(), Some(1));
    assert_eq!(se2match(&["--help"]).status.code(), Some(0));
}

#[test]
fn data_errors_exit_with_two() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("missing.csv");
    let o = se2match(&["-o", dir.path().to_str().unwrap(), "kfold", missing.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
    assert!(stderr(&o).starts_with("error:"));
}

#[test]
fn mismatched_template_domain_exits_with_two() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path().to_str().unwrap();
    let data = dir.path().join("data");
    assert!(se2match(&["-o", data.to_str().unwrap(), "synth", "disk", "-n", "4"]).status.success());
    let cfg = write_config(dir.path());
    let tpl = dir.path().join("tpl");
    let manifest = data.join("manifest.csv");
    let o = se2match(&[
        "--config",
        &cfg,
        "--set",
        "domains=r2",
        "--set",
        "templates=A",
        "-o",
        tpl.to_str().unwrap(),
        "train",
        manifest.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let template = tpl.join("A_r2.tpl");
    let image = data.join("img_000.png");
    let o = se2match(&[
        "--config",
        &cfg,
        "-o",
        d,
        "match",
        "--domain",
        "se2",
        "-t",
        template.to_str().unwrap(),
        image.to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(2));
    let msg = stderr(&o);
    assert!(msg.contains("SE2") && msg.contains("R2"), "{msg}");

    // The matching domain works and its detections evaluate against the manifest.
    let out = dir.path().join("match");
    let o = se2match(&[
        "--config",
        &cfg,
        "-o",
        out.to_str().unwrap(),
        "match",
        "--no-heatmaps",
        "--manifest",
        manifest.to_str().unwrap(),
        "-t",
        template.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let dets = out.join("detections.csv");
    let o = se2match(&["-o", out.to_str().unwrap(), "evaluate", manifest.to_str().unwrap(), dets.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(String::from_utf8_lossy(&o.stdout).contains("A_r2"));
}
