//! End-to-end checks of the installed binary: exit codes, artifact
//! round-trips, and a distributed fit spawned as real processes.

use std::io::{Read, Write};
use std::net::TcpListener;
use std::path::Path;
use std::process::{Command, Stdio};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_epmix"))
}

fn write_config(dir: &Path, body: &str) -> std::path::PathBuf {
    let path = dir.join("config.json");
    std::fs::write(&path, body).unwrap();
    path
}

fn base_config(dir: &Path) -> String {
    format!(
        r#"{{
  "likelihood": "binomial-probit",
  "seed": 7,
  "data": "{}/dataset.csv",
  "ep": {{ "max_passes": 6, "schedule": "parallel" }},
  "simulate": {{
    "likelihood": "binomial-probit",
    "n_groups": 12,
    "obs_per_group": 6,
    "p": 2,
    "q": 1,
    "beta": [0.5, -0.4],
    "lambda": null,
    "sigma": [[0.5]],
    "offset": 0.0,
    "trials": 4
  }}
}}"#,
        dir.display()
    )
}

#[test]
fn bad_configs_exit_with_code_two() {
    let dir = tempfile::tempdir().unwrap();
    // No --config at all.
    let out = bin().args(["fit"]).output().unwrap();
    assert_eq!(out.status.code(), Some(2));

    // Config file missing.
    let out = bin()
        .args(["fit", "--config", "/nonexistent/config.json"])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));

    // Config missing a required field, named in the message.
    let cfg = write_config(dir.path(), r#"{"likelihood": "zip"}"#);
    let out = bin()
        .args(["fit", "--config"])
        .arg(&cfg)
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("seed"), "{stderr}");
}

#[test]
fn simulate_fit_sample_diagnose_pipeline_succeeds() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), &base_config(dir.path()));
    let out_dir = dir.path().join("artifacts");

    // The config's data path points into the config directory, so the
    // simulated dataset lands there; fit artifacts go to --out.
    for (verb, dest) in [
        ("simulate", dir.path()),
        ("fit", out_dir.as_path()),
        ("sample", out_dir.as_path()),
    ] {
        let out = bin()
            .args([verb, "--config"])
            .arg(&cfg)
            .arg("--out")
            .arg(dest)
            .output()
            .unwrap();
        assert_eq!(
            out.status.code(),
            Some(0),
            "{verb}: {}",
            String::from_utf8_lossy(&out.stderr)
        );
    }
    assert!(dir.path().join("dataset.csv").exists());
    assert!(dir.path().join("truth.json").exists());
    for artifact in [
        "posterior.json",
        "summary.csv",
        "trace.csv",
        "timing.json",
        "samples.csv",
    ] {
        assert!(out_dir.join(artifact).exists(), "missing {artifact}");
    }

    // Score the sampler's draws against themselves through the binary.
    let samples = out_dir.join("samples.csv");
    let diag_cfg = write_config(
        &dir.path().join("."),
        &format!(
            r#"{{
  "likelihood": "binomial-probit",
  "seed": 7,
  "approx_samples": "{s}",
  "ref_samples": "{s}"
}}"#,
            s = samples.display()
        ),
    );
    let out = bin()
        .args(["diagnose", "--config"])
        .arg(&diag_cfg)
        .arg("--out")
        .arg(&out_dir)
        .output()
        .unwrap();
    assert_eq!(
        out.status.code(),
        Some(0),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let metrics = std::fs::read_to_string(out_dir.join("metrics.csv")).unwrap();
    assert!(metrics.contains("mmd2u,all,0.0000000000000000e0"), "{metrics}");
}

#[test]
fn distributed_processes_reproduce_the_local_fit() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), &base_config(dir.path()));

    let out = bin()
        .args(["simulate", "--config"])
        .arg(&cfg)
        .arg("--out")
        .arg(dir.path())
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(0));

    let local_dir = dir.path().join("local");
    let out = bin()
        .args(["fit", "--config"])
        .arg(&cfg)
        .arg("--out")
        .arg(&local_dir)
        .output()
        .unwrap();
    assert_eq!(
        out.status.code(),
        Some(0),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );

    // Reserve a port, then hand it to the serve process.
    let addr = {
        let probe = TcpListener::bind("127.0.0.1:0").unwrap();
        probe.local_addr().unwrap().to_string()
    };
    let dist_dir = dir.path().join("dist");
    let central = bin()
        .args(["serve", "--config"])
        .arg(&cfg)
        .arg("--out")
        .arg(&dist_dir)
        .args(["--serve", &addr, "--workers", "1"])
        .stderr(Stdio::piped())
        .spawn()
        .unwrap();
    std::thread::sleep(std::time::Duration::from_millis(800));
    let worker = bin()
        .args(["worker", "--connect", &addr])
        .output()
        .unwrap();
    let central_out = central.wait_with_output().unwrap();
    assert_eq!(
        central_out.status.code(),
        Some(0),
        "central: {}",
        String::from_utf8_lossy(&central_out.stderr)
    );
    assert_eq!(worker.status.code(), Some(0));

    // One worker over the wire computes bit for bit what the parallel
    // schedule computes in process.
    let local = std::fs::read(local_dir.join("summary.csv")).unwrap();
    let dist = std::fs::read(dist_dir.join("summary.csv")).unwrap();
    assert_eq!(local, dist);
}

#[test]
fn worker_fed_garbage_exits_with_protocol_code() {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let addr = listener.local_addr().unwrap().to_string();
    let handle = std::thread::spawn(move || {
        let (mut s, _) = listener.accept().unwrap();
        let mut prefix = [0u8; 4];
        s.read_exact(&mut prefix).unwrap();
        let mut body = vec![0u8; u32::from_le_bytes(prefix) as usize];
        s.read_exact(&mut body).unwrap();
        let garbage = b"notjson";
        s.write_all(&(garbage.len() as u32).to_le_bytes()).unwrap();
        s.write_all(garbage).unwrap();
        s.flush().unwrap();
        // Drain whatever the worker replies, then drop the socket.
        let mut rest = Vec::new();
        let _ = s.read_to_end(&mut rest);
    });
    let out = bin().args(["worker", "--connect", &addr]).output().unwrap();
    handle.join().unwrap();
    assert_eq!(
        out.status.code(),
        Some(4),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
}
