use std::fs;
use std::process::Command;

fn fleetmap(args: &[&str]) -> std::process::Output {
    Command::new(env!("CARGO_BIN_EXE_fleetmap")).args(args).output().unwrap()
}

#[test]
fn gen_scene_then_agent_fuse_eval() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.toml");
    let out = dir.path().join("out");
    let gen = fleetmap(&["gen-scene", "--frames", "40", "--seed", "5"]);
    assert!(gen.status.success());
    fs::write(&cfg, &gen.stdout).unwrap();
    let text = String::from_utf8(gen.stdout).unwrap();
    assert!(text.contains("seed = 5"));

    let common = ["--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap()];
    for id in ["0", "1"] {
        let o = fleetmap(&[&["agent", id][..], &common].concat());
        assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    }
    let fuse = fleetmap(&[&["fuse"][..], &common].concat());
    assert_eq!(fuse.status.code(), Some(0), "{}", String::from_utf8_lossy(&fuse.stderr));
    assert!(String::from_utf8_lossy(&fuse.stdout).contains("inter-loop"));
    assert!(out.join("global.ply").is_file());
    let eval = fleetmap(&[&["eval"][..], &common].concat());
    assert_eq!(eval.status.code(), Some(0), "{}", String::from_utf8_lossy(&eval.stderr));
    assert!(String::from_utf8_lossy(&eval.stdout).contains("ate_rmse_m.combined"));
    assert!(out.join("metrics.csv").is_file());
}

#[test]
fn run_writes_report() {
    let dir = tempfile::tempdir().unwrap();
    let o = fleetmap(&["run", "--agents", "1", "--out", dir.path().to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(String::from_utf8_lossy(&o.stdout).starts_with("status = ok"));
    assert!(dir.path().join("agent0.tum").is_file());
    assert!(dir.path().join("report.txt").is_file());
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.toml");
    fs::write(&bad, "unknown_key = 1\n").unwrap();
    assert_eq!(fleetmap(&["run", "--config", bad.to_str().unwrap()]).status.code(), Some(2));
    assert_eq!(fleetmap(&["run", "--predictor", "gpu"]).status.code(), Some(2));
    assert_eq!(fleetmap(&["run", "--agents", "0"]).status.code(), Some(2));
    let missing = dir.path().join("missing.toml");
    assert_eq!(fleetmap(&["run", "--config", missing.to_str().unwrap()]).status.code(), Some(3));
    let out = dir.path().join("o");
    fs::create_dir_all(&out).unwrap();
    fs::write(out.join("agent0.smap"), b"SMAP\x01").unwrap();
    assert_eq!(fleetmap(&["fuse", "--out", out.to_str().unwrap()]).status.code(), Some(3));
    let unreachable = fleetmap(&["run", "--predictor", "bridge:127.0.0.1:1", "--out", out.to_str().unwrap()]);
    assert_eq!(unreachable.status.code(), Some(3));
}
