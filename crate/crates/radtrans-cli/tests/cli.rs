use std::path::PathBuf;
use std::process::{Command, Output};

fn radtrans(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_radtrans"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn scratch(name: &str) -> PathBuf {
    let d = std::env::temp_dir().join(format!("radtrans-cli-{}-{name}", std::process::id()));
    let _ = std::fs::remove_dir_all(&d);
    std::fs::create_dir_all(&d).unwrap();
    d
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

#[test]
fn selftest_passes_on_clean_kernel() {
    let o = radtrans(&["selftest", "--kernel-level", "4"]);
    let out = stdout(&o);
    assert_eq!(o.status.code(), Some(0), "{out}");
    assert!(out.lines().any(|l| l.contains("PASS")));
    assert!(!out.lines().any(|l| l.starts_with("FAIL")), "{out}");
}

#[test]
fn selftest_detects_injected_fault() {
    let o = radtrans(&["selftest", "--kernel-level", "4", "--inject-fault", "0.05"]);
    let out = stdout(&o);
    assert_eq!(o.status.code(), Some(1), "{out}");
    assert!(out.contains("FAIL"));
}

#[test]
fn kernel_dump_writes_header_and_entries() {
    let dir = scratch("dump");
    let path = dir.join("k.txt");
    let o = radtrans(&[
        "kernel-dump",
        "--level",
        "3",
        "--gamma",
        "0.5",
        "--out",
        path.to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(0));
    let text = std::fs::read_to_string(&path).unwrap();
    let mut lines = text.lines();
    assert!(lines.next().unwrap().starts_with("3 "));
    let entries: Vec<_> = lines.collect();
    assert!(!entries.is_empty() && entries.len() <= 24 * 24);
    for e in entries {
        let f: Vec<&str> = e.split_whitespace().collect();
        assert_eq!(f.len(), 3);
        assert!(f[2].parse::<f64>().unwrap().is_finite());
    }
}

#[test]
fn loose_run_certifies_and_writes_outputs() {
    let dir = scratch("run");
    let o = radtrans(&["run", "--epsilon", "0.5", "--out", dir.to_str().unwrap()]);
    assert_eq!(
        o.status.code(),
        Some(0),
        "{}{}",
        stdout(&o),
        String::from_utf8_lossy(&o.stderr)
    );
    for f in [
        "convergence.csv",
        "certificate.json",
        "calls.csv",
        "density_final.txt",
        "kernel.txt",
        "singular_values.txt",
    ] {
        assert!(dir.join(f).exists(), "missing {f}");
    }
    let cert = std::fs::read_to_string(dir.join("certificate.json")).unwrap();
    assert!(
        cert.contains("\"terminated\": true") || cert.contains("\"terminated\":true"),
        "{cert}"
    );
}

#[test]
fn missing_config_is_an_error() {
    let o = radtrans(&["run", "--config", "/nonexistent/radtrans.cfg"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn unknown_config_key_is_an_error() {
    let dir = scratch("cfg");
    let path = dir.join("bad.cfg");
    std::fs::write(&path, "epsilon = 0.1\nnot_a_key = 3\n").unwrap();
    let o = radtrans(&["run", "--config", path.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("not_a_key"));
}

#[test]
fn time_limit_stops_the_run() {
    let o = radtrans(&["run", "--epsilon", "1e-3", "--time-limit", "1e-6"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("time limit"));
}
