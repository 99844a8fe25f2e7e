use mde_cli::commands::fmt_f64;
use mde_cli::config::{emit_config, parse_config, parse_config_str};
use proptest::prelude::*;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn models() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../models")
}

fn mde(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mde"))
        .current_dir(dir)
        .args(args)
        .output()
        .expect("binary runs")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn error_json(o: &Output) -> serde_json::Value {
    let text = stderr(o);
    let line = text.lines().rev().find(|l| l.starts_with('{')).expect("error JSON on stderr");
    serde_json::from_str(line).unwrap()
}

fn write(dir: &Path, name: &str, text: &str) -> PathBuf {
    let p = dir.join(name);
    std::fs::write(&p, text).unwrap();
    p
}

#[test]
fn validate_accepts_every_shipped_config() {
    let tmp = tempfile::tempdir().unwrap();
    for e in std::fs::read_dir(models()).unwrap() {
        let p = e.unwrap().path();
        if p.extension().is_some_and(|x| x == "toml") {
            let o = mde(tmp.path(), &["validate", "--model", p.to_str().unwrap()]);
            assert!(o.status.success(), "{}: {}", p.display(), stderr(&o));
        }
    }
}

#[test]
fn minimal_flat_config_materializes_defaults() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write(
        tmp.path(),
        "m.toml",
        "schema_version = 1\n[model]\nn = 8\nclass = \"complex\"\nself_energy = { kind = \"flat\" }\n",
    );
    let man = tmp.path().join("out.manifest.toml");
    let o = mde(tmp.path(), &["validate", "--model", cfg.to_str().unwrap(), "--manifest", man.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    let text = std::fs::read_to_string(&man).unwrap();
    for section in ["[solver]", "[density]", "[stability]", "[ensemble]", "[run]", "[manifest]"] {
        assert!(text.contains(section), "manifest lacks {section}:\n{text}");
    }
    assert!(text.contains("max_iter = 3000"));
}

#[test]
fn density_then_edges_finds_semicircle_edges() {
    let tmp = tempfile::tempdir().unwrap();
    let model = models().join("flat.toml");
    let m = model.to_str().unwrap();
    let o = mde(tmp.path(), &["density", "--model", m, "--out", "rho.csv"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let o = mde(tmp.path(), &["edges", "--model", m, "--curve", "rho.csv", "--out", "edges.json"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let v: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(tmp.path().join("edges.json")).unwrap()).unwrap();
    let mut taus: Vec<f64> = v["edges"]
        .as_array()
        .unwrap()
        .iter()
        .map(|e| e["report"]["tau0"].as_f64().unwrap())
        .collect();
    taus.sort_by(f64::total_cmp);
    assert_eq!(taus.len(), 2);
    assert!((taus[0] + 2.0).abs() < 1e-6 && (taus[1] - 2.0).abs() < 1e-6, "{taus:?}");
}

#[test]
fn unknown_command_exits_one_with_usage() {
    let tmp = tempfile::tempdir().unwrap();
    let o = mde(tmp.path(), &["frobnicate"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("Usage"));
    assert_eq!(error_json(&o)["exit_code"], 1);
}

#[test]
fn help_exits_zero() {
    let tmp = tempfile::tempdir().unwrap();
    let o = mde(tmp.path(), &["--help"]);
    assert!(o.status.success());
    assert!(String::from_utf8_lossy(&o.stdout).contains("universality"));
}

#[test]
fn non_convergence_exits_two() {
    let tmp = tempfile::tempdir().unwrap();
    let base = std::fs::read_to_string(models().join("two_band.toml")).unwrap();
    let cfg = write(tmp.path(), "m.toml", &format!("{base}\n[solver]\nmax_iter = 1\ntol = 1e-15\n"));
    let o = mde(tmp.path(), &["solve", "--model", cfg.to_str().unwrap(), "--tau", "0.8", "--eta", "1e-6"]);
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
    assert_eq!(error_json(&o)["error"], "numerical");
}

#[test]
fn manifest_round_trip_and_replay() {
    let tmp = tempfile::tempdir().unwrap();
    let model = models().join("two_band.toml");
    let o = mde(tmp.path(), &["density", "--model", model.to_str().unwrap(), "--N", "40", "--out", "a.csv"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let man = tmp.path().join("a.csv.manifest.toml");
    let cfg = parse_config(&man).unwrap();
    assert_eq!(cfg.model.n, 40);
    let again = parse_config_str(&emit_config(&cfg).unwrap(), tmp.path()).unwrap();
    assert_eq!(again, cfg);
    let o = mde(tmp.path(), &["density", "--model", man.to_str().unwrap(), "--out", "b.csv"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let a = std::fs::read(tmp.path().join("a.csv")).unwrap();
    let b = std::fs::read(tmp.path().join("b.csv")).unwrap();
    assert_eq!(a, b);
}

#[test]
fn sample_is_reproducible_and_lossless() {
    let tmp = tempfile::tempdir().unwrap();
    let m = models().join("two_band.toml");
    let m = m.to_str().unwrap();
    for out in ["x.csv", "y.csv"] {
        let o = mde(tmp.path(), &["sample", "--model", m, "--N", "12", "--trials", "3", "--seed", "9", "--out", out]);
        assert!(o.status.success(), "{}", stderr(&o));
    }
    let x = std::fs::read_to_string(tmp.path().join("x.csv")).unwrap();
    assert_eq!(x, std::fs::read_to_string(tmp.path().join("y.csv")).unwrap());
    let mut rdr = csv::Reader::from_reader(x.as_bytes());
    let mut rows = 0;
    for rec in rdr.records() {
        let rec = rec.unwrap();
        let v: f64 = rec[2].parse().unwrap();
        assert_eq!(fmt_f64(v), &rec[2]);
        rows += 1;
    }
    assert_eq!(rows, 36);
}

#[test]
fn diagonal_dimension_error_names_both_sizes() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write(
        tmp.path(),
        "m.toml",
        "schema_version = 1\n[model]\nn = 4\nclass = \"complex\"\na = { kind = \"diagonal\", values = [1.0, 2.0, 3.0] }\nself_energy = { kind = \"flat\" }\n",
    );
    let o = mde(tmp.path(), &["validate", "--model", cfg.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
    let msg = error_json(&o)["message"].as_str().unwrap().to_string();
    assert!(msg.contains('3') && msg.contains('4'), "{msg}");
}

#[test]
fn csv_dimension_error_names_both_sizes() {
    let tmp = tempfile::tempdir().unwrap();
    write(tmp.path(), "a.csv", "1,0,0\n0,1,0\n0,0,1\n");
    let cfg = write(
        tmp.path(),
        "m.toml",
        "schema_version = 1\n[model]\nn = 5\nclass = \"real\"\na = { kind = \"csv\", path = \"a.csv\" }\nself_energy = { kind = \"flat\" }\n",
    );
    let o = mde(tmp.path(), &["validate", "--model", cfg.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
    let msg = error_json(&o)["message"].as_str().unwrap().to_string();
    assert!(msg.contains("has 3 rows") && msg.contains("expected 5"), "{msg}");
}

#[test]
fn non_psd_kronecker_coefficients_cite_min_eigenvalue() {
    let tmp = tempfile::tempdir().unwrap();
    write(tmp.path(), "a0.csv", "1,0\n0,1\n");
    write(tmp.path(), "a1.csv", "0,1\n1,0\n");
    write(tmp.path(), "c.csv", "1,2\n2,1\n");
    let cfg = write(
        tmp.path(),
        "m.toml",
        "schema_version = 1\n[model]\nn = 2\nclass = \"complex\"\n[model.self_energy]\nkind = \"kronecker\"\nstructure = [\"a0.csv\", \"a1.csv\"]\ncoefficients = \"c.csv\"\n",
    );
    let o = mde(tmp.path(), &["validate", "--model", cfg.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
    let msg = error_json(&o)["message"].as_str().unwrap().to_string();
    assert!(msg.contains("min eigenvalue -1"), "{msg}");
}

#[test]
fn unknown_keys_and_schema_versions_are_rejected() {
    let tmp = tempfile::tempdir().unwrap();
    let good = "[model]\nn = 4\nclass = \"complex\"\nself_energy = { kind = \"flat\" }\n";
    for text in [format!("schema_version = 1\nbogus = 3\n{good}"), format!("schema_version = 99\n{good}")] {
        let cfg = write(tmp.path(), "m.toml", &text);
        let o = mde(tmp.path(), &["validate", "--model", cfg.to_str().unwrap()]);
        assert_eq!(o.status.code(), Some(1), "{text}");
    }
}

#[test]
fn inputs_are_never_modified() {
    let tmp = tempfile::tempdir().unwrap();
    let src = std::fs::read_to_string(models().join("kronecker.toml")).unwrap();
    let dir = tmp.path().join("kronecker");
    std::fs::create_dir(&dir).unwrap();
    for f in ["a0.csv", "a1.csv", "a2.csv", "a3.csv", "c.csv"] {
        std::fs::copy(models().join("kronecker").join(f), dir.join(f)).unwrap();
    }
    let cfg = write(tmp.path(), "kronecker.toml", &src);
    let snapshot = |p: &Path| -> Vec<(PathBuf, Vec<u8>)> {
        let mut v: Vec<_> = std::fs::read_dir(p)
            .unwrap()
            .map(|e| e.unwrap().path())
            .filter(|p| p.is_file())
            .map(|p| (p.clone(), std::fs::read(&p).unwrap()))
            .collect();
        v.sort();
        v
    };
    let before = (std::fs::read(&cfg).unwrap(), snapshot(&dir));
    let c = cfg.to_str().unwrap();
    for args in [
        vec!["validate", "--model", c],
        vec!["solve", "--model", c, "--tau", "0.1", "--eta", "0.05"],
        vec!["density", "--model", c, "--out", "rho.csv"],
        vec!["sample", "--model", c, "--trials", "4", "--out", "s.csv"],
    ] {
        let o = mde(tmp.path(), &args);
        assert!(o.status.success(), "{args:?}: {}", stderr(&o));
    }
    // Pointing the manifest at the input must fail without touching it.
    let o = mde(tmp.path(), &["validate", "--model", c, "--manifest", c]);
    assert_eq!(o.status.code(), Some(1));
    assert_eq!(before, (std::fs::read(&cfg).unwrap(), snapshot(&dir)));
}

#[test]
fn thread_count_comes_from_flag_or_environment() {
    let tmp = tempfile::tempdir().unwrap();
    let m = models().join("flat.toml");
    let m = m.to_str().unwrap();
    let o = mde(tmp.path(), &["validate", "--threads", "1", "--model", m, "--manifest", "t.toml"]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(std::fs::read_to_string(tmp.path().join("t.toml")).unwrap().contains("threads = 1"));
    let o = Command::new(env!("CARGO_BIN_EXE_mde"))
        .current_dir(tmp.path())
        .env("MDE_THREADS", "2")
        .args(["validate", "--model", m, "--manifest", "e.toml"])
        .output()
        .unwrap();
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(std::fs::read_to_string(tmp.path().join("e.toml")).unwrap().contains("threads = 2"));
}

proptest! {
    #[test]
    fn float_format_round_trips(x in proptest::num::f64::NORMAL | proptest::num::f64::SUBNORMAL | proptest::num::f64::ZERO) {
        let s = fmt_f64(x);
        let back: f64 = s.parse().unwrap();
        prop_assert_eq!(back.to_bits(), x.to_bits());
    }
}
