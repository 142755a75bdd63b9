use std::process::Command;

fn pac(args: &[&str]) -> String {
    let out = Command::new(env!("CARGO_BIN_EXE_pac")).args(args).output().unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

#[test]
fn bench_writes_csv() {
    let dir = tempfile::tempdir().unwrap();
    let csv = dir.path().join("out.csv");
    pac(&[
        "bench", "--engine", "aead,pac", "--capacity-blocks", "512", "--ops", "200", "--warmup", "20",
        "--seal-delay-ms", "0", "--csv", csv.to_str().unwrap(),
    ]);
    let text = std::fs::read_to_string(&csv).unwrap();
    let lines: Vec<_> = text.lines().collect();
    assert_eq!(lines.len(), 3);
    assert!(lines[0].starts_with("engine,capacity_blocks"));
    assert!(lines[1].starts_with("aead,512"));
    assert!(lines[2].starts_with("pac,512"));
}

#[test]
fn attack_script_is_detected_by_pac() {
    let dir = tempfile::tempdir().unwrap();
    let script = dir.path().join("script.txt");
    std::fs::write(&script, "# mixed tampering\nrandom 20 replay corrupt swap\n").unwrap();
    let out = pac(&[
        "attack", "--engine", "pac", "--capacity-blocks", "512", "--log-depth", "4", "--seal-delay-ms", "0",
        "--script", script.to_str().unwrap(),
    ]);
    assert!(out.contains("injections=20 before_return=20"), "{out}");
}

#[test]
fn random_crash_schedules_pass() {
    let out = pac(&["crash", "--engine", "sync", "--capacity-blocks", "64", "--seal-delay-ms", "0", "--random", "3"]);
    assert!(out.contains("violations=0"), "{out}");
}
