use std::fs;
use std::io::{Read, Write};
use std::path::Path;
use std::process::{Command, Output, Stdio};
use std::time::{Duration, Instant};

use serde_json::{json, Value};

fn askpaint(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_askpaint")).args(args).output().unwrap()
}

fn toy_config(dir: &Path) -> std::path::PathBuf {
    let cfg = json!({
        "model": {"height": 8, "width": 8, "color_channels": 2, "depth": 1, "base_width": 4, "seed": 1},
        "train": {"batch_size": 2, "learning_rate": 0.001, "checkpoint_interval": 5},
        "scene": {"height": 8, "width": 8, "shape_count": [1, 2], "shape_size": [3, 4]}
    });
    let path = dir.join("toy.json");
    fs::write(&path, cfg.to_string()).unwrap();
    path
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn train_toy(dir: &Path, out: &Path) -> Output {
    let cfg = toy_config(dir);
    askpaint(&["train", "--config", s(&cfg), "--steps", "10", "--out", s(out)])
}

#[test]
fn train_writes_checkpoint_log_and_rerunnable_snapshot() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");
    let o = train_toy(dir.path(), &out);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(out.join("model.ckpt").is_file());
    assert!(out.join("checkpoints/step_0000005.ckpt").is_file());
    let log = fs::read_to_string(out.join("loss_log.csv")).unwrap();
    assert_eq!(log.lines().count(), 11, "header plus 10 rows");
    assert!(log.starts_with("step,total,reg_loss,seg_loss,mean_n_hint"));

    // the snapshot alone reproduces the run
    let snapshot = out.join("resolved_config.json");
    let snap: Value = serde_json::from_str(&fs::read_to_string(&snapshot).unwrap()).unwrap();
    assert_eq!(snap["command"], "train");
    assert_eq!(snap["train"]["steps"], 10);
    let rerun = dir.path().join("rerun");
    let o = askpaint(&["train", "--config", s(&snapshot), "--out", s(&rerun)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(log, fs::read_to_string(rerun.join("loss_log.csv")).unwrap());
    assert_eq!(fs::read(out.join("model.ckpt")).unwrap(), fs::read(rerun.join("model.ckpt")).unwrap());
}

#[test]
fn eval_rollout_and_synth_produce_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let run = dir.path().join("run");
    assert!(train_toy(dir.path(), &run).status.success());
    let ckpt = run.join("model.ckpt");

    let data = dir.path().join("data");
    let cfg = dir.path().join("synth.json");
    fs::write(&cfg, json!({"scene": {"height": 8, "width": 8, "shape_count": [1, 2], "shape_size": [3, 4]}, "count": 5}).to_string()).unwrap();
    let o = askpaint(&["synth", "--config", s(&cfg), "--out", s(&data), "--seed", "4"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(fs::read_dir(&data).unwrap().filter(|e| e.as_ref().unwrap().path().extension().is_some_and(|x| x == "png")).count(), 5);
    assert!(data.join("seg/scene_00000.png").is_file());

    let ev = dir.path().join("eval");
    let o = askpaint(&["eval", "--checkpoint", s(&ckpt), "--dataset", s(&data), "--max-steps", "3", "--out", s(&ev), "--dump", "1"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let report: Value = serde_json::from_str(&fs::read_to_string(ev.join("report.json")).unwrap()).unwrap();
    let keys: Vec<&String> = report["psnr_by_steps"].as_object().unwrap().keys().collect();
    assert_eq!(keys, ["0", "1", "2", "3"]);
    assert!(report["class_precision"]["soft"]["mean"].is_number());
    assert!(ev.join("images/image_00000_montage.png").is_file());
    assert!(ev.join("resolved_config.json").is_file());

    let ro = dir.path().join("rollout");
    let o = askpaint(&["rollout", "--checkpoint", s(&ckpt), "--image", s(&data.join("scene_00001.png")), "--answers", "3", "--out", s(&ro)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let montage = askpaint_core::dataset::read_png(&ro.join("montage.png")).unwrap();
    assert_eq!((montage.width, montage.height), (4 * 8 + 3 * 2, 3 * 8 + 2 * 2));
}

#[test]
fn exit_codes_distinguish_bad_input_from_runtime_failure() {
    let dir = tempfile::tempdir().unwrap();
    let o = askpaint(&["train", "--no-such-flag"]);
    assert_eq!(o.status.code(), Some(1));

    let bad = dir.path().join("bad.json");
    fs::write(&bad, json!({"train": {"batch_size": 0}}).to_string()).unwrap();
    let o = askpaint(&["train", "--config", s(&bad), "--out", s(&dir.path().join("x"))]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("train.batch_size"));

    let o = askpaint(&["eval", "--out", s(&dir.path().join("e"))]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("checkpoint"));

    let missing = dir.path().join("missing.ckpt");
    let o = askpaint(&["eval", "--checkpoint", s(&missing), "--out", s(&dir.path().join("e"))]);
    assert_eq!(o.status.code(), Some(2));

    let garbage = dir.path().join("garbage.ckpt");
    fs::write(&garbage, b"not a checkpoint").unwrap();
    let o = askpaint(&["eval", "--checkpoint", s(&garbage), "--out", s(&dir.path().join("e"))]);
    assert_eq!(o.status.code(), Some(2));

    assert_eq!(askpaint(&["--help"]).status.code(), Some(0));
}

#[test]
fn serve_honours_environment_overrides() {
    let dir = tempfile::tempdir().unwrap();
    let run = dir.path().join("run");
    assert!(train_toy(dir.path(), &run).status.success());
    let port = std::net::TcpListener::bind("127.0.0.1:0").unwrap().local_addr().unwrap().port();
    let mut child = Command::new(env!("CARGO_BIN_EXE_askpaint"))
        .arg("serve")
        .env("ASKPAINT_PORT", port.to_string())
        .env("ASKPAINT_CHECKPOINT_DIR", &run)
        .stdout(Stdio::null())
        .stderr(Stdio::null())
        .spawn()
        .unwrap();
    let deadline = Instant::now() + Duration::from_secs(20);
    let body = loop {
        if let Ok(mut stream) = std::net::TcpStream::connect(("127.0.0.1", port)) {
            stream.write_all(b"GET /checkpoints HTTP/1.1\r\nHost: x\r\nConnection: close\r\n\r\n").unwrap();
            let mut out = String::new();
            stream.read_to_string(&mut out).unwrap();
            break out;
        }
        assert!(Instant::now() < deadline, "server did not start");
        std::thread::sleep(Duration::from_millis(100));
    };
    child.kill().unwrap();
    child.wait().unwrap();
    assert!(body.starts_with("HTTP/1.1 200"), "{body}");
    assert!(body.contains("\"id\":\"model\""), "{body}");
}
