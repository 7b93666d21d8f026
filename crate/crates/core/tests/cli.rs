use std::path::Path;
use std::process::{Command, Output};

use pulseforge::cli::{load_sequence, manifest_path, read_sweep_csv, RunManifest};

fn pulseforge(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_pulseforge"))
        .args(args)
        .env_remove("PULSEFORGE_SEED")
        .output()
        .expect("binary runs")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exited normally")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn solve_reference_rotation_writes_five_piece_sequence() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("reference.csv");
    let o = pulseforge(&["solve", "--rotation", "-0.7853981633974483", "2.0943951023931953", "1.5707963267948966", "--out", s(&out)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let seq = load_sequence(&out).unwrap();
    assert_eq!(seq.pieces().iter().map(|p| p.exchange).collect::<Vec<_>>(), [0.0, 1.0, 0.0, 1.0, 0.0]);
    let m: RunManifest = serde_json::from_slice(&std::fs::read(manifest_path(&out)).unwrap()).unwrap();
    assert_eq!(m.command, "solve");
    assert_eq!(m.outputs.len(), 1);
}

#[test]
fn identity_solves_to_free_rotations_only() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("id.csv");
    let o = pulseforge(&["solve", "--rotation", "0", "0", "0", "--out", s(&out)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let seq = load_sequence(&out).unwrap();
    // only the two fixed frame pieces and a full x turn remain
    let angles: Vec<f64> = seq.pieces().iter().map(|p| p.angle).collect();
    assert_eq!(angles[1], std::f64::consts::PI);
    assert_eq!(angles[3], std::f64::consts::PI);
    assert_eq!(angles[2], 0.0);
}

#[test]
fn batch_solve_reports_per_row_status() {
    let dir = tempfile::tempdir().unwrap();
    let batch = dir.path().join("targets.csv");
    std::fs::write(&batch, "alpha,beta,theta\n-1,2,1\n-2,2,2\n1,2,1\n").unwrap();
    let out = dir.path().join("status.csv");
    let o = pulseforge(&["solve", "--batch", s(&batch), "--corrected", "--seed", "1", "--out", s(&out)]);
    // the third target lies outside the domain
    assert_eq!(code(&o), 1, "{}", stderr(&o));
    let text = std::fs::read_to_string(&out).unwrap();
    let status: Vec<&str> = text.lines().skip(1).map(|l| l.split(',').nth(1).unwrap()).collect();
    assert_eq!(status, ["ok", "ok", "domain_error"]);
}

#[test]
fn generation_and_training_refuse_to_run_unseeded() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("c.corpus");
    let o = pulseforge(&["gen-dataset", "--task", "naive", "--out", s(&out)]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("--seed"));
    assert!(!out.exists());
    let o = pulseforge(&["train", "--corpus", s(&out), "--out", s(&dir.path().join("m.json"))]);
    assert_eq!(code(&o), 2);
}

#[test]
fn seed_falls_back_to_the_environment() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("c.corpus");
    let o = Command::new(env!("CARGO_BIN_EXE_pulseforge"))
        .args(["gen-dataset", "--task", "naive", "--out", s(&out)])
        .env("PULSEFORGE_SEED", "11")
        .output()
        .unwrap();
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let m: RunManifest = serde_json::from_slice(&std::fs::read(manifest_path(&out)).unwrap()).unwrap();
    assert_eq!(m.seeds, [11]);
}

#[test]
fn naive_pipeline_is_reproducible_from_its_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let p = |n: &str| dir.path().join(n);
    let (corpus, model, curve) = (p("n.corpus"), p("m.json"), p("m.curve.csv"));
    assert_eq!(code(&pulseforge(&["gen-dataset", "--task", "naive", "--seed", "5", "--out", s(&corpus)])), 0);
    let train = |out: &Path| {
        pulseforge(&[
            "train", "--corpus", s(&corpus), "--seed", "5", "--records", "300", "--epochs", "3", "--neurons", "8",
            "--eval-every", "1", "--eval-points", "11", "--out", s(out),
        ])
    };
    let o = train(&model);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let header = std::fs::read_to_string(&curve).unwrap().lines().next().unwrap().to_string();
    assert_eq!(header, "epoch,train_cost,alpha,beta,theta,alpha_window,mean");

    let m: RunManifest = serde_json::from_slice(&std::fs::read(manifest_path(&model)).unwrap()).unwrap();
    assert_eq!(m.inputs[0].path, corpus);
    assert_eq!(m.outputs.len(), 2);
    let again = p("again.json");
    assert_eq!(code(&train(&again)), 0);
    assert_eq!(std::fs::read(&model).unwrap(), std::fs::read(&again).unwrap());
    assert_eq!(std::fs::read(&curve).unwrap(), std::fs::read(p("again.curve.csv")).unwrap());

    let seq = p("pred.csv");
    let o = pulseforge(&["predict", "--model", s(&model), "--rotation", "-1", "1", "2", "--out", s(&seq)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert_eq!(load_sequence(&seq).unwrap().len(), 5);
    // a naive model cannot take decomposition angles
    let o = pulseforge(&["predict", "--model", s(&model), "--angles", "0", "3", "3", "--out", s(&seq)]);
    assert_eq!(code(&o), 2);
}

#[test]
fn compare_emits_four_sweeps_and_report_passes() {
    let dir = tempfile::tempdir().unwrap();
    let o = pulseforge(&["compare", "--out", s(dir.path())]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let mut sweeps: Vec<String> = std::fs::read_dir(dir.path())
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.file_name().unwrap().to_str().unwrap().contains("delta"))
        .map(|p| p.to_str().unwrap().to_string())
        .collect();
    sweeps.sort();
    assert_eq!(sweeps.len(), 4);
    for f in &sweeps {
        let ids: Vec<String> = read_sweep_csv(Path::new(f)).unwrap().into_iter().map(|g| g.0).collect();
        assert_eq!(ids, ["naive", "corrected"]);
    }
    let mut args = vec!["report", "--sweep"];
    args.extend(sweeps.iter().map(String::as_str));
    let o = pulseforge(&args);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stdout));
    assert_eq!(String::from_utf8_lossy(&o.stdout).matches("PASS").count(), 4);
    assert!(dir.path().join("manifest.json").exists());
}

#[test]
fn sweep_of_a_solved_sequence_has_the_naive_slope() {
    let dir = tempfile::tempdir().unwrap();
    let (seq, out) = (dir.path().join("seq.csv"), dir.path().join("sweep.csv"));
    assert_eq!(code(&pulseforge(&["solve", "--rotation", "-1", "2", "1", "--out", s(&seq)])), 0);
    let o = pulseforge(&["sweep", "--sequence", s(&seq), "--axis", "hyperfine", "--out", s(&out)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let stdout = String::from_utf8_lossy(&o.stdout);
    let slope: f64 = stdout.trim().rsplit(' ').next().unwrap().parse().unwrap();
    assert!((slope - 2.0).abs() < 0.3, "{stdout}");
    assert_eq!(read_sweep_csv(&out).unwrap()[0].0, "seq");
}

#[test]
fn report_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let curve = dir.path().join("c.csv");
    std::fs::write(&curve, "epoch,train_cost,mean\n10,0.3,0.2\n50,0.1,0.05\n200,0.05,0.02\n").unwrap();
    let o = pulseforge(&["report", "--curve", s(&curve)]);
    assert_eq!(code(&o), 1);
    let stdout = String::from_utf8_lossy(&o.stdout);
    assert!(stdout.contains("FAIL") && stdout.contains("final mean"), "{stdout}");
    assert_eq!(code(&pulseforge(&["report", "--curve", s(&curve), "--threshold", "0.1"])), 0);

    let missing = dir.path().join("nope.csv");
    let o = pulseforge(&["report", "--curve", s(&missing)]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("nope.csv"));
}

#[test]
fn malformed_sequence_is_reported_with_its_line() {
    let dir = tempfile::tempdir().unwrap();
    let seq = dir.path().join("bad.csv");
    std::fs::write(&seq, "index,exchange,angle,duration,t_start\n0,0.0,1.0,1.0,0.0\n1,one,1.0,1.0,0.0\n").unwrap();
    let o = pulseforge(&["sweep", "--sequence", s(&seq), "--axis", "charge", "--out", s(&dir.path().join("o.csv"))]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("bad.csv") && stderr(&o).contains('3'), "{}", stderr(&o));
}
