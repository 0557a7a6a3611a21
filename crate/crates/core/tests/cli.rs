use std::fs;
use std::io::{BufRead, BufReader};
use std::path::Path;
use std::process::{Command, Output, Stdio};

use latnas::coordinator::checkpoint::{read_manifest, read_results, RESULTS_LOG};
use latnas::sampler::{read_encodings, read_manifest as read_bucket_manifest};
use latnas::search_space::SearchSpaceSpec;

fn latnas(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_latnas")).args(args).output().unwrap()
}

fn code(out: &Output) -> i32 {
    out.status.code().unwrap_or(-1)
}

fn path(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn usage_errors_exit_with_one() {
    assert_eq!(code(&latnas(&["--help"])), 0);
    assert_eq!(code(&latnas(&["frobnicate"])), 1);
    assert_eq!(code(&latnas(&["sample"])), 1);
    let dir = tempfile::tempdir().unwrap();
    let bad_bucket = latnas(&["search", "--bucket", "2:1", "--budget", "3", "--seed", "1", "--checkpoint-dir", path(dir.path())]);
    assert_eq!(code(&bad_bucket), 1);
    let bad_bounds = latnas(&["stratify", "--bounds", "2,1", "--samples", "4", "--out", path(dir.path())]);
    assert_eq!(code(&bad_bounds), 1);
    let stderr = String::from_utf8_lossy(&bad_bounds.stderr);
    assert_eq!(stderr.lines().count(), 1, "{stderr}");
}

#[test]
fn runtime_errors_exit_with_two() {
    let dir = tempfile::tempdir().unwrap();
    let file = dir.path().join("plain");
    fs::write(&file, "x").unwrap();
    let ckpt = file.join("ckpt");
    let out = latnas(&["search", "--bucket", "0:2", "--budget", "3", "--seed", "1", "--checkpoint-dir", path(&ckpt)]);
    assert_eq!(code(&out), 2);
    let out = latnas(&["report", "--logs", path(&dir.path().join("missing")), "--out", path(dir.path())]);
    assert_eq!(code(&out), 2);
}

#[test]
fn sample_build_table_stratify() {
    let dir = tempfile::tempdir().unwrap();
    let samples = dir.path().join("samples.csv");
    assert_eq!(code(&latnas(&["sample", "--samples", "64", "--out", path(&samples)])), 0);
    let encodings = read_encodings(&samples).unwrap();
    assert_eq!(encodings.len(), 64);
    let space = SearchSpaceSpec::table1();
    assert!(encodings.iter().all(|e| space.validate(e).is_empty()));

    let table = dir.path().join("table.tsv");
    let out = latnas(&["build-table", "--samples", "64", "--workers", "4", "--out", path(&table)]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let first = fs::read(&table).unwrap();
    // Idempotent: extending with the same samples adds nothing.
    let again = dir.path().join("table2.tsv");
    let out = latnas(&["build-table", "--samples", "64", "--existing", path(&table), "--out", path(&again)]);
    assert_eq!(code(&out), 0);
    assert_eq!(fs::read(&again).unwrap(), first);

    let strata = dir.path().join("strata");
    let out = latnas(&[
        "stratify", "--bounds", "1,2", "--samples", "64", "--table", path(&table), "--out", path(&strata),
    ]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let manifest = fs::read_dir(&strata)
        .unwrap()
        .map(|e| e.unwrap().path())
        .find(|p| p.file_name().unwrap().to_string_lossy().starts_with("manifest"))
        .expect("manifest written");
    let rows = read_bucket_manifest(&manifest).unwrap();
    assert_eq!(rows.len(), 3);
    assert_eq!(rows.iter().map(|r| r.count).sum::<usize>(), 64);
}

#[test]
fn failing_backend_writes_partial_table_and_failures() {
    let dir = tempfile::tempdir().unwrap();
    let table = dir.path().join("t.tsv");
    let out = latnas(&["build-table", "--samples", "4", "--backend", "command:sh -c 'exit 3'", "--out", path(&table)]);
    assert_eq!(code(&out), 2);
    assert!(table.exists());
    let failures = fs::read_to_string(table.with_extension("failures")).unwrap();
    assert!(failures.lines().count() > 0);
}

#[test]
fn search_resumes_and_report_matches() {
    let dir = tempfile::tempdir().unwrap();
    let ckpt = dir.path().join("run");
    let args = |budget: &'static str| {
        vec!["search", "--bucket", "0:2", "--budget", budget, "--seed", "3", "--clients", "2", "--checkpoint-dir", path(&ckpt)]
            .into_iter()
            .map(String::from)
            .collect::<Vec<_>>()
    };
    let run = |a: Vec<String>| Command::new(env!("CARGO_BIN_EXE_latnas")).args(a).output().unwrap();
    assert_eq!(code(&run(args("12"))), 0);
    assert_eq!(read_results(&ckpt.join(RESULTS_LOG)).unwrap().len(), 12);
    // A larger budget continues the same run instead of starting over.
    let out = run(args("20"));
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let results = read_results(&ckpt.join(RESULTS_LOG)).unwrap();
    assert_eq!(results.len(), 20);
    assert_eq!(read_manifest(&ckpt).unwrap().seed, 3);
    let mut other_seed = args("20");
    other_seed[6] = "4".into();
    assert_eq!(code(&run(other_seed)), 2, "a directory of another search is refused");

    let report = dir.path().join("report");
    let out = latnas(&["report", "--logs", path(&ckpt), "--out", path(&report)]);
    assert_eq!(code(&out), 0);
    for f in ["model_hub.csv", "pareto.csv", "plot.csv"] {
        assert_eq!(fs::read(report.join(f)).unwrap(), fs::read(ckpt.join(f)).unwrap(), "{f}");
    }
    let plot = fs::read_to_string(report.join("plot.csv")).unwrap();
    assert_eq!(plot.lines().filter(|l| !l.starts_with('#')).count(), 21);
}

#[test]
fn serve_and_client_processes() {
    let dir = tempfile::tempdir().unwrap();
    let mut server = Command::new(env!("CARGO_BIN_EXE_latnas"))
        .args(["serve", "--bucket", "0:2", "--budget", "6", "--seed", "2", "--port", "0", "--checkpoint-dir", path(dir.path())])
        .stderr(Stdio::piped())
        .spawn()
        .unwrap();
    let mut lines = BufReader::new(server.stderr.take().unwrap()).lines();
    let addr = loop {
        let line = lines.next().expect("server announces its address").unwrap();
        if let Some(a) = line.strip_prefix("listening on ") {
            break a.to_string();
        }
    };
    let client = latnas(&["client", "--server", &addr, "--client-id", "w1"]);
    assert_eq!(code(&client), 0, "{}", String::from_utf8_lossy(&client.stderr));
    let status = server.wait().unwrap();
    assert!(status.success());
    let results = read_results(&dir.path().join(RESULTS_LOG)).unwrap();
    assert_eq!(results.len(), 6);
    assert!(results.iter().all(|r| r.client_id.as_deref() == Some("w1")));
}
