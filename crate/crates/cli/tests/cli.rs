use std::path::{Path, PathBuf};
use std::process::{Command, Output, Stdio};
use std::time::{Duration, Instant};

fn fuzz() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_fuzz"));
    c.env_remove("RUST_LOG");
    c
}

fn fixture(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../core/fixtures").join(name)
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn write_config(dir: &Path, cases: u64, extra: &str) -> PathBuf {
    let text = format!(
        "specs = [{spec:?}]\nknowledge_base = {kb:?}\ncaptures = [{pcap:?}]\noutput_dir = \"out\"\nmaster_seed = 7\ncycles = 2\n{extra}\n\n[budget]\ncases = {cases}\n\n[target]\nport = 0\n\n[simulator]\nenabled = true\nbugs_enabled = [\"length_overflow_crash\"]\n",
        spec = fixture("modbus_tcp.spec"),
        kb = fixture("modbus_kb.jsonl"),
        pcap = fixture("modbus_50.pcap"),
    );
    let p = dir.join("campaign.toml");
    std::fs::write(&p, text).unwrap();
    p
}

#[test]
fn spec_check_counts_fields_and_combos() {
    let text = std::fs::read_to_string(fixture("modbus_tcp.spec")).unwrap();
    let count = |kw: &str| text.lines().filter(|l| l.split_whitespace().next() == Some(kw)).count();
    let o = fuzz().args(["spec", "check"]).arg(fixture("modbus_tcp.spec")).output().unwrap();
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(stdout(&o).trim(), format!("OK, {} fields, {} combos", count("field"), count("class")));

    let o = fuzz().args(["spec", "check"]).arg(fixture("missing.spec")).output().unwrap();
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn run_report_and_replay() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), 150, "");
    let o = fuzz().arg("run").arg(&cfg).output().unwrap();
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let out = dir.path().join("out");
    let report_txt = std::fs::read_to_string(out.join("report.txt")).unwrap();
    assert_eq!(stdout(&o), report_txt);
    assert!(report_txt.contains("Cases: 300 generated"));

    // report recomputes the same text from the ledger
    let o = fuzz().arg("report").arg(out.join("ledger.jsonl")).output().unwrap();
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(stdout(&o), report_txt);
    let o = fuzz().arg("report").arg(out.join("ledger.jsonl")).args(["--format", "json"]).output().unwrap();
    let json: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(json, serde_json::from_str::<serde_json::Value>(&std::fs::read_to_string(out.join("report.json")).unwrap()).unwrap());

    // a crash case from the ledger crashes a fresh simulator again
    let ledger = std::fs::read_to_string(out.join("ledger.jsonl")).unwrap();
    let crash = ledger
        .lines()
        .map(|l| serde_json::from_str::<serde_json::Value>(l).unwrap())
        .find(|r| r["reason"] == "crash")
        .expect("campaign crashed the simulator at least once");
    let case = crash["observation"]["case_id"].as_str().unwrap();
    let o = fuzz().arg("replay").arg(out.join("ledger.jsonl")).args(["--case", case]).output().unwrap();
    assert!(o.status.success(), "{}", stderr(&o));
    let v: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(v["reason"], "crash");
    assert_eq!(v["observation"]["liveness_after"], "down");

    let o = fuzz().arg("replay").arg(out.join("ledger.jsonl")).args(["--case", "nope"]).output().unwrap();
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn same_seed_same_ledger_cases() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    for d in [&a, &b] {
        let o = fuzz().arg("run").arg(write_config(d.path(), 80, "")).output().unwrap();
        assert!(o.status.success(), "{}", stderr(&o));
    }
    let cases = |d: &Path| -> Vec<String> {
        std::fs::read_to_string(d.join("out/ledger.jsonl"))
            .unwrap()
            .lines()
            .filter(|l| l.contains("\"record\":\"case\""))
            .map(str::to_string)
            .collect()
    };
    let ca = cases(a.path());
    assert_eq!(ca.len(), 160);
    assert_eq!(ca, cases(b.path()));
}

#[test]
fn report_on_an_empty_ledger_fails() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("ledger.jsonl");
    std::fs::write(&p, "").unwrap();
    let o = fuzz().arg("report").arg(&p).output().unwrap();
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("no test cases"), "{}", stderr(&o));
}

#[test]
fn config_errors_exit_with_usage_status() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("bad.toml");
    std::fs::write(&p, "specs = [\"nowhere.spec\"]\n").unwrap();
    let o = fuzz().arg("run").arg(&p).output().unwrap();
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("nowhere.spec"));
    let o = fuzz().arg("run").arg(write_config(dir.path(), 10, "")).args(["--cycles", "0"]).output().unwrap();
    assert_eq!(o.status.code(), Some(2));
    let o = fuzz().arg("frobnicate").output().unwrap();
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn kb_add_then_search() {
    let dir = tempfile::tempdir().unwrap();
    let store = dir.path().join("kb.jsonl");
    std::fs::copy(fixture("modbus_kb.jsonl"), &store).unwrap();
    let o = fuzz()
        .args(["kb", "add"])
        .arg(&store)
        .args(["--id", "note-1", "--kind", "vulnerability-note", "--title", "Oversized MBAP length"])
        .args(["--keywords", "overflow,mbap_length"])
        .output()
        .unwrap();
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(std::fs::read_to_string(&store).unwrap().lines().count(), 28);
    let o = fuzz().args(["kb", "search"]).arg(&store).arg("overflow mbap_length").output().unwrap();
    assert!(stdout(&o).starts_with("1.0000  note-1  Oversized MBAP length"), "{}", stdout(&o));
    let o = fuzz().args(["kb", "add"]).arg(&store).args(["--id", "note-1", "--kind", "vulnerability-note", "--title", "x", "--keywords", "y"]).output().unwrap();
    assert_eq!(o.status.code(), Some(1));
    let o = fuzz().args(["kb", "add"]).arg(&store).args(["--id", "n2", "--kind", "rumor", "--title", "x", "--keywords", "y"]).output().unwrap();
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn simulator_logs_one_event_per_request() {
    use std::io::{Read, Write};
    let dir = tempfile::tempdir().unwrap();
    let events = dir.path().join("events.jsonl");
    let port = std::net::TcpListener::bind("127.0.0.1:0").unwrap().local_addr().unwrap().port();
    let mut child = fuzz()
        .args(["sim", "--port", &port.to_string(), "--duration-ms", "1500", "--events"])
        .arg(&events)
        .stderr(Stdio::null())
        .spawn()
        .unwrap();
    let deadline = Instant::now() + Duration::from_secs(10);
    let mut conn = loop {
        match std::net::TcpStream::connect(("127.0.0.1", port)) {
            Ok(c) => break c,
            Err(_) if Instant::now() < deadline => std::thread::sleep(Duration::from_millis(20)),
            Err(e) => panic!("{e}"),
        }
    };
    conn.write_all(&[0, 1, 0, 0, 0, 6, 1, 3, 0, 0, 0, 2]).unwrap();
    conn.shutdown(std::net::Shutdown::Write).unwrap();
    let mut reply = Vec::new();
    conn.read_to_end(&mut reply).unwrap();
    assert_eq!(reply.len(), 13);
    assert_eq!(&reply[..9], &[0, 1, 0, 0, 0, 7, 1, 3, 4]);
    drop(conn);
    assert!(child.wait().unwrap().success());
    let log = std::fs::read_to_string(&events).unwrap();
    let kinds: Vec<String> =
        log.lines().map(|l| serde_json::from_str::<serde_json::Value>(l).unwrap()["kind"].as_str().unwrap_or("").to_string()).collect();
    assert_eq!(kinds.iter().filter(|k| *k == "reply").count(), 1, "{log}");
}

#[cfg(unix)]
#[test]
fn interrupt_writes_a_partial_report() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), 200_000, "");
    let child = fuzz().arg("run").arg(&cfg).stdout(Stdio::piped()).stderr(Stdio::piped()).spawn().unwrap();
    let ledger = dir.path().join("out/ledger.jsonl");
    let deadline = Instant::now() + Duration::from_secs(30);
    while std::fs::metadata(&ledger).map(|m| m.len() < 20_000).unwrap_or(true) {
        assert!(Instant::now() < deadline, "campaign never got going");
        std::thread::sleep(Duration::from_millis(50));
    }
    let st = Command::new("kill").args(["-INT", &child.id().to_string()]).status().unwrap();
    assert!(st.success());
    let o = child.wait_with_output().unwrap();
    assert_eq!(o.status.code(), Some(130), "{}", stderr(&o));
    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("out/report.json")).unwrap()).unwrap();
    assert_eq!(report["partial"], true);
    let generated = report["totals"]["generated"].as_u64().unwrap();
    assert!(generated > 0 && generated < 400_000, "{generated}");
    assert!(std::fs::read_to_string(&ledger).unwrap().trim_end().ends_with(r#"{"record":"end","completed":false}"#));
}
