use std::fs;
use std::io::Write;
use std::process::{Command, Output, Stdio};

use promptveil_core::detect::{BloomParams, BLOOM_HEADER_LEN, BLOOM_MAGIC};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_promptveil"))
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("spawn promptveil")
}

fn stdout(o: &Output) -> String {
    String::from_utf8(o.stdout.clone()).unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8(o.stderr.clone()).unwrap()
}

#[test]
fn empty_text_is_empty_output() {
    let o = run(&["transform", "--text", ""]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(stdout(&o), "");
    let summary: serde_json::Value = serde_json::from_str(stderr(&o).lines().last().unwrap()).unwrap();
    assert_eq!(summary["event"], "summary");
    assert_eq!(summary["entities"], 0);
}

#[test]
fn stdin_input_matches_text_input() {
    let text = "Ask Sarah to call 555-123-4567 today.";
    let by_arg = run(&["transform", "--text", text, "--seed", "4"]);
    let mut child = bin()
        .args(["transform", "--stdin", "--seed", "4"])
        .stdin(Stdio::piped())
        .stdout(Stdio::piped())
        .stderr(Stdio::null())
        .spawn()
        .unwrap();
    child.stdin.take().unwrap().write_all(text.as_bytes()).unwrap();
    let by_stdin = child.wait_with_output().unwrap();
    assert!(by_arg.status.success() && by_stdin.status.success());
    assert_eq!(stdout(&by_arg), stdout(&by_stdin));
}

#[test]
fn malformed_policy_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("policy.json");
    fs::write(&p, r#"{"bogus": 1}"#).unwrap();
    let o = run(&["transform", "--text", "hi", "--policy", p.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("bogus"));

    fs::write(&p, "not json").unwrap();
    assert_eq!(run(&["transform", "--text", "hi", "--policy", p.to_str().unwrap()]).status.code(), Some(2));
}

#[test]
fn missing_input_is_a_usage_error() {
    assert_eq!(run(&["transform"]).status.code(), Some(2));
}

#[test]
fn transform_report_lines_describe_each_entity() {
    let o =
        run(&["transform", "--text", "Email Sarah at sarah@example.com about card 4111 1111 1111 1111", "--seed", "3"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let out = stdout(&o);
    assert!(!out.contains("Sarah") && !out.contains("4111 1111 1111 1111"));
    assert!(out.contains("@example.com"));

    let lines: Vec<serde_json::Value> = stderr(&o).lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    let (summary, entities) = lines.split_last().unwrap();
    assert_eq!(summary["entities"], 3);
    assert_eq!(entities.len(), 3);
    for e in entities {
        assert_eq!(e["event"], "entity");
        let (start, end) = (e["start"].as_u64().unwrap() as usize, e["end"].as_u64().unwrap() as usize);
        assert!(start < end);
        assert!(out.contains(e["replacement"].as_str().unwrap()));
    }
    let spent: f64 = entities.iter().map(|e| e["epsilon_spent"].as_f64().unwrap()).sum();
    assert!((summary["epsilon_spent"].as_f64().unwrap() - spent).abs() < 1e-9);
}

#[test]
fn seeded_transforms_repeat() {
    let args = ["transform", "--text", "Sarah met Tom on 2021-03-04.", "--seed", "11"];
    assert_eq!(stdout(&run(&args)), stdout(&run(&args)));
}

#[test]
fn reverse_restores_with_a_saved_session() {
    let dir = tempfile::tempdir().unwrap();
    let session = dir.path().join("session.json");
    let s = session.to_str().unwrap();
    let original = "Please thank Sarah and Tom for the notes.";
    let o = run(&["transform", "--text", original, "--session", s, "--seed", "5"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let masked = stdout(&o);
    assert_ne!(masked, original);
    assert!(session.exists());

    // A second prompt in the same session reuses the saved mappings.
    let again = stdout(&run(&["transform", "--text", "Tell Sarah again.", "--session", s, "--seed", "6"]));
    let pseudonym = masked.split_whitespace().nth(2).unwrap();
    assert_eq!(again, format!("Tell {pseudonym} again."));

    let back = run(&["reverse", "--text", &masked, "--session", s]);
    assert!(back.status.success(), "{}", stderr(&back));
    assert_eq!(stdout(&back), original);

    let missing = dir.path().join("absent.json");
    assert_eq!(run(&["reverse", "--text", "x", "--session", missing.to_str().unwrap()]).status.code(), Some(1));
}

#[test]
fn build_bloom_writes_the_sized_header() {
    let dir = tempfile::tempdir().unwrap();
    let names = dir.path().join("names.txt");
    let list: String = (0..1000).map(|i| format!("Name{i}\n")).collect();
    fs::write(&names, list).unwrap();
    let (a, b) = (dir.path().join("a.bin"), dir.path().join("b.bin"));
    for out in [&a, &b] {
        let o = run(&["build-bloom", "--names", names.to_str().unwrap(), "--out", out.to_str().unwrap()]);
        assert!(o.status.success(), "{}", stderr(&o));
    }
    let bytes = fs::read(&a).unwrap();
    assert_eq!(bytes, fs::read(&b).unwrap());

    let want = BloomParams::optimal(1000, 0.025).unwrap();
    assert_eq!(bytes[..4], BLOOM_MAGIC);
    let m = u64::from_le_bytes(bytes[6..14].try_into().unwrap());
    let k = u16::from_le_bytes([bytes[14], bytes[15]]);
    assert_eq!((m, k), (want.bits, want.hashes));
    assert_eq!(bytes.len(), BLOOM_HEADER_LEN + m.div_ceil(8) as usize);
}

#[test]
fn build_bloom_rejects_an_empty_list() {
    let dir = tempfile::tempdir().unwrap();
    let names = dir.path().join("empty.txt");
    fs::write(&names, "").unwrap();
    let out = dir.path().join("f.bin");
    let o = run(&["build-bloom", "--names", names.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
    assert!(!out.exists());
}

#[test]
fn build_table_output_verifies() {
    let dir = tempfile::tempdir().unwrap();
    let names = dir.path().join("names.tsv");
    fs::write(&names, "Lily\tF\nOrrin\tM\nSable\tN\n").unwrap();
    let table = dir.path().join("t.wdet");
    let o = run(&["build-table", "--names", names.to_str().unwrap(), "--dim", "16", "--out", table.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    let v = run(&["verify-table", table.to_str().unwrap()]);
    assert!(v.status.success(), "{}", stderr(&v));
}

#[test]
fn bench_csv_has_one_row_per_cell_and_iteration() {
    let o = run(&["bench", "--configs", "simple,names", "--lengths", "1-3,8", "--iterations", "2"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let mut reader = csv::Reader::from_reader(o.stdout.as_slice());
    assert_eq!(reader.headers().unwrap(), vec!["config", "length", "iter", "overhead_ms"]);
    let rows: Vec<csv::StringRecord> = reader.records().map(Result::unwrap).collect();
    assert_eq!(rows.len(), 2 * 4 * 2);
    assert!(rows.iter().all(|r| r[3].parse::<f64>().unwrap() > 0.0));
    assert_eq!(&rows[0][0], "simple");
    assert_eq!(&rows[rows.len() - 1][0], "names");
}

#[test]
fn bench_rejects_bad_lengths() {
    assert_eq!(run(&["bench", "--lengths", "0"]).status.code(), Some(2));
    assert_eq!(run(&["bench", "--lengths", "5-x"]).status.code(), Some(2));
}
