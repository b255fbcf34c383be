use std::path::Path;
use std::process::{Command, Output};

use pgmpp::data::write_raw;
use pgmpp::harness::read_json;

fn pgmpp(dir: &Path, args: &[&str]) -> Output {
    let out = Command::new(env!("CARGO_BIN_EXE_pgmpp")).current_dir(dir).args(args).output().unwrap();
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    out
}

fn json(out: &Output) -> serde_json::Value {
    serde_json::from_slice(&out.stdout).unwrap()
}

#[test]
fn gen_build_lookup() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    pgmpp(d, &["gen", "--distribution", "lognormal", "--n", "50000", "--out", "k.bin"]);
    let b = json(&pgmpp(d, &["build", "--keys", "k.bin", "--epsilon-leaf", "32"]));
    assert!(b["stats"]["leaf_segments"].as_u64().unwrap() > 0);
    assert!(d.join("k.bin.pgm").exists());

    let out = pgmpp(d, &["lookup", "--keys", "k.bin", "--index", "k.bin.pgm", "--query", "0", "18446744073709551615"]);
    let text = String::from_utf8(out.stdout).unwrap();
    let ranks: Vec<&str> = text.lines().map(|l| l.split('\t').nth(1).unwrap()).collect();
    assert_eq!(ranks, ["0", "50000"]);

    let c = json(&pgmpp(d, &["coverage", "--keys", "k.bin"]));
    let levels = c["per_level"].as_array().unwrap();
    assert_eq!(levels.last().unwrap()["segments"], 1);
}

#[test]
fn ingest_deduplicates() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    write_raw(&d.join("raw.bin"), &[9, 3, 3, 7, 9, 1]).unwrap();
    let r = json(&pgmpp(d, &["ingest", "--input", "raw.bin", "--out", "k.bin"]));
    assert_eq!(r["keys"], 4);
    assert_eq!(r["duplicates_removed"], 2);
    let out = pgmpp(d, &["lookup", "--keys", "k.bin", "--query", "7"]);
    assert_eq!(String::from_utf8(out.stdout).unwrap().trim(), "7\t2");
}

#[test]
fn estimate_verifies_against_fit() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    pgmpp(d, &["gen", "--n", "100000", "--out", "k.bin"]);
    let e = json(&pgmpp(d, &["estimate", "--keys", "k.bin", "--estimator", "simple", "--epsilon-leaf", "8,64", "--verify"]));
    let rows = e["rows"].as_array().unwrap();
    assert_eq!(rows.len(), 2);
    assert!(rows.iter().all(|r| r["actual"].as_u64().unwrap() > 0));
}

#[test]
fn sweep_json_to_csv() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    pgmpp(d, &["gen", "--n", "20000", "--out", "k.bin"]);
    pgmpp(d, &["sweep", "--keys", "k.bin", "--grid", "8,64", "--reps", "1", "--workload-size", "200", "--json", "r.json"]);
    let reports = read_json(std::fs::File::open(d.join("r.json")).unwrap()).unwrap();
    assert_eq!(reports.len(), 8);
    let csv = String::from_utf8(pgmpp(d, &["report", "--input", "r.json"]).stdout).unwrap();
    assert_eq!(csv.lines().count(), 9);
    assert!(csv.starts_with("dataset,n,eps_internal,eps_leaf"));
}

#[test]
fn tune_reads_calibration_file() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let cal = "c_miss = 200\nc_hit = 5\nc_segment = 5\nc_linear_fixed = 2.5\nc_linear_per_element = 0.5\ndelta = 32\n";
    std::fs::write(d.join("host.cal"), cal).unwrap();
    pgmpp(d, &["gen", "--n", "100000", "--out", "k.bin"]);
    let t = json(&pgmpp(d, &["tune", "--keys", "k.bin", "--budget-bytes", "100000", "--calibration", "host.cal"]));
    assert!(t["result"]["predicted_bytes"].as_f64().unwrap() <= 100_000.0);
    assert_eq!(t["constants"]["delta"], 32);
}
