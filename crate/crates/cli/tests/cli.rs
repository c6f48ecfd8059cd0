use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn asgd(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_asgd")).args(args).output().expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = asgd(args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn write_config(dir: &Path) -> String {
    let path = dir.join("small.cfg");
    fs::write(
        &path,
        "# small problem\nn = 3\nm = 400\nk = 3\nmin_center_dist = 3\nbox_half_width = 4\ncluster_sigma = 0.5\nworkers = 2\nb = 4\niterations = 40\nepsilon = 0.05\nbatch_epochs = 5\n",
    )
    .unwrap();
    path.display().to_string()
}

#[test]
fn generate_then_run_on_files() {
    let dir = tempfile::tempdir().unwrap();
    let prefix = dir.path().join("data/set");
    let p = prefix.display().to_string();
    ok(&["generate", "--n", "2", "--m", "200", "--k", "2", "--min-center-dist", "2", "--seed", "4", "--out", &p]);
    assert_eq!(fs::metadata(format!("{p}.data")).unwrap().len(), 24 + 200 * 2 * 8);
    let out = dir.path().join("res/file").display().to_string();
    let stdout = ok(&[
        "run", "--solver", "sgd", "--b", "2", "--iterations", "30", "--out", &out,
        "--set", &format!("data={p}.data"), "--set", &format!("truth={p}.truth"), "--set", "k=2",
    ]);
    assert!(stdout.contains("median runtime to target"), "{stdout}");
    let median = fs::read_to_string(format!("{out}.median.csv")).unwrap();
    assert!(median.starts_with("time_s,samples,quant_error,gt_error,msgs_sent,msgs_accepted,b_current\n"));
}

#[test]
fn rerun_from_manifest_is_identical() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path());
    let first = dir.path().join("a/run").display().to_string();
    ok(&["run", "--config", &cfg, "--network", "ethernet", "--adaptive-b", "--folds", "2", "--out", &first]);
    let second = dir.path().join("b/run").display().to_string();
    ok(&["run", "--config", &format!("{first}.manifest"), "--out", &second]);
    for name in ["fold0.csv", "fold1.csv", "fold0.queue.csv", "median.csv", "summary.csv"] {
        let a = fs::read(format!("{first}.{name}")).unwrap();
        let b = fs::read(format!("{second}.{name}")).unwrap();
        assert_eq!(a, b, "{name}");
    }
}

#[test]
fn sweep_and_compare() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path());
    let out = dir.path().join("s/sweep").display().to_string();
    ok(&["sweep", "--config", &cfg, "--var", "b", "--values", "2,8", "--out", &out]);
    let summary = fs::read_to_string(format!("{out}.sweep.csv")).unwrap();
    let lines: Vec<&str> = summary.lines().collect();
    assert_eq!(lines[0], "value,median_runtime_to_target,median_final_gt_error,median_msgs_accepted");
    assert_eq!(lines.len(), 3);
    let out = dir.path().join("c/cmp").display().to_string();
    let stdout = ok(&["compare", "--config", &cfg, "--presets", "infiniband,ethernet", "--out", &out]);
    assert!(stdout.contains("ethernet"));
    assert_eq!(fs::read_to_string(format!("{out}.compare.csv")).unwrap().lines().count(), 3);
}

#[test]
fn invalid_input_fails_with_diagnostic() {
    let out = asgd(&["run", "--set", "colour=blue"]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("colour"));
    let out = asgd(&["run", "--folds", "0"]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("folds"));
    let out = asgd(&["run", "--network", "dialup"]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("network"));
}
