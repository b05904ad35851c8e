use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tempfile::TempDir;

const SCHEMA: &str = r#"[
  {"name": "avg_age", "kind": "continuous", "batch": 0, "core": true},
  {"name": "mortgage", "kind": "categorical", "classes": ["yes", "no"], "batch": 0, "core": true},
  {"name": "two_languages", "kind": "categorical", "classes": ["yes", "no"], "batch": 1, "core": false},
  {"name": "tenure", "kind": "categorical", "classes": ["own", "rent", "other"], "batch": 1, "core": false}
]"#;

// Postal codes, populations and the first three variables of the census excerpt.
const COARSE: &str = "\
unit_id,population,avg_age,mortgage,two_languages,tenure:own,tenure:rent,tenure:other
M5S3G2,467,35.1,0.32,0.69,0.40,0.55,0.05
V3N1P5,269,37.2,0.35,0.67,0.52,0.45,0.03
L5M6V9,41,49.1,0.67,0.43,0.80,0.15,0.05
";

fn sync(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_sync")).args(args).output().expect("binary runs")
}

fn inputs(dir: &TempDir) -> (PathBuf, PathBuf) {
    let schema = dir.path().join("schema.json");
    let coarse = dir.path().join("coarse.csv");
    fs::write(&schema, SCHEMA).unwrap();
    fs::write(&coarse, COARSE).unwrap();
    (schema, coarse)
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn run_generate(dir: &TempDir, name: &str, extra: &[&str]) -> PathBuf {
    let (schema, coarse) = inputs(dir);
    let out = dir.path().join(name);
    let mut args = vec!["generate", "--coarse", s(&coarse), "--schema", s(&schema), "--out", s(&out)];
    args.extend_from_slice(extra);
    let result = sync(&args);
    assert!(result.status.success(), "{}", String::from_utf8_lossy(&result.stderr));
    out
}

#[test]
fn generate_writes_one_row_per_person() {
    let dir = TempDir::new().unwrap();
    let out = run_generate(&dir, "out.csv", &[]);
    let text = fs::read_to_string(&out).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next().unwrap(), "unit_id,person_index,avg_age,mortgage,two_languages,tenure");
    assert_eq!(lines.count(), 467 + 269 + 41);

    let manifest: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.path().join("out.manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["seed"], 0);
    assert_eq!(manifest["rows"], 777);
    assert_eq!(manifest["sd_mode"], "sqrt_n");
    assert!(manifest["decisions"].is_object());
    let timings: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.path().join("out.timings.json")).unwrap()).unwrap();
    assert!(timings.as_array().unwrap().iter().any(|t| t["phase"] == "scaling"));
}

#[test]
fn repeated_runs_are_byte_identical() {
    let dir = TempDir::new().unwrap();
    let a = run_generate(&dir, "a.csv", &["--seed", "11"]);
    let b = run_generate(&dir, "b.csv", &["--seed", "11", "--jobs", "1"]);
    assert_eq!(fs::read(&a).unwrap(), fs::read(&b).unwrap());
    assert_eq!(
        fs::read(dir.path().join("a.manifest.json")).unwrap(),
        fs::read(dir.path().join("b.manifest.json")).unwrap()
    );
    let c = run_generate(&dir, "c.csv", &["--seed", "12"]);
    assert_ne!(fs::read(&a).unwrap(), fs::read(&c).unwrap());
}

#[test]
fn saved_models_reproduce_the_run() {
    let dir = TempDir::new().unwrap();
    let model = dir.path().join("model.json");
    let a = run_generate(&dir, "a.csv", &["--save-model", s(&model)]);
    let b = run_generate(&dir, "b.csv", &["--model", s(&model)]);
    assert_eq!(fs::read(&a).unwrap(), fs::read(&b).unwrap());
}

#[test]
fn empty_coarse_file_names_the_loader() {
    let dir = TempDir::new().unwrap();
    let (schema, _) = inputs(&dir);
    let empty = dir.path().join("empty.csv");
    fs::write(&empty, "").unwrap();
    let out = dir.path().join("out.csv");
    let result = sync(&["generate", "--coarse", s(&empty), "--schema", s(&schema), "--out", s(&out)]);
    assert!(!result.status.success());
    assert!(String::from_utf8_lossy(&result.stderr).contains("load_coarse_csv"));
    assert!(!out.exists());
}

#[test]
fn bad_flags_are_rejected() {
    let dir = TempDir::new().unwrap();
    let (schema, coarse) = inputs(&dir);
    let out = dir.path().join("out.csv");
    let base = ["generate", "--coarse", s(&coarse), "--schema", s(&schema), "--out", s(&out)];
    for extra in [&["--contamination", "1.5"][..], &["--sd-mode", "wide"], &["--outlier-removal", "maybe"]] {
        let mut args = base.to_vec();
        args.extend_from_slice(extra);
        assert!(!sync(&args).status.success(), "{extra:?}");
    }
}

#[test]
fn sd_modes_are_recorded_in_the_manifest() {
    let dir = TempDir::new().unwrap();
    for mode in ["paper", "sqrt_n", "pooled"] {
        let name = format!("{mode}.csv");
        run_generate(&dir, &name, &["--sd-mode", mode]);
        let manifest = fs::read_to_string(dir.path().join(format!("{mode}.manifest.json"))).unwrap();
        let manifest: serde_json::Value = serde_json::from_str(&manifest).unwrap();
        assert_eq!(manifest["sd_mode"], mode);
    }
}

#[test]
fn outlier_report_lists_every_unit() {
    let dir = TempDir::new().unwrap();
    let report = dir.path().join("outliers.csv");
    run_generate(&dir, "out.csv", &["--outlier-report", s(&report), "--contamination", "0.4"]);
    let text = fs::read_to_string(&report).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], "unit_id,score,flagged");
    let ids: Vec<&str> = lines[1..].iter().map(|l| l.split(',').next().unwrap()).collect();
    assert_eq!(ids, ["M5S3G2", "V3N1P5", "L5M6V9"]);
    assert_eq!(lines.iter().filter(|l| l.ends_with(",true")).count(), 1);
}

#[test]
fn evaluating_a_file_against_itself_scores_one() {
    let dir = TempDir::new().unwrap();
    let out = run_generate(&dir, "out.csv", &[]);
    let report = dir.path().join("report.csv");
    let schema = dir.path().join("schema.json");
    let result =
        sync(&["evaluate", "--truth", s(&out), "--generated", s(&out), "--schema", s(&schema), "--out", s(&report)]);
    assert!(result.status.success(), "{}", String::from_utf8_lossy(&result.stderr));
    let text = fs::read_to_string(&report).unwrap();
    let overall = text.lines().find(|l| l.starts_with("overall,cells,")).unwrap();
    assert!(overall.starts_with("overall,cells,1.000000,"), "{overall}");
}

#[test]
fn simulate_reports_each_seed_and_the_mean() {
    let dir = TempDir::new().unwrap();
    let config = dir.path().join("sim.json");
    fs::write(
        &config,
        r#"{"units": 30, "sizes": {"min": 2, "max": 20}, "rho": 0.3, "tau": 0.5, "kappa": 1.0, "block_size": 5,
            "features": [
              {"name": "age", "classes": 4, "batch": 0, "ordinal": true},
              {"name": "gender", "classes": 2, "batch": 0},
              {"name": "news", "classes": 2, "batch": 1},
              {"name": "region", "classes": 3, "batch": 1}
            ]}"#,
    )
    .unwrap();
    let report = dir.path().join("sim.csv");
    let result = sync(&["simulate", "--config", s(&config), "--seeds", "5", "--out", s(&report)]);
    assert!(result.status.success(), "{}", String::from_utf8_lossy(&result.stderr));

    let mut rdr = csv::Reader::from_path(&report).unwrap();
    let header = rdr.headers().unwrap().clone();
    assert_eq!(&header[0], "seed");
    let rows: Vec<csv::StringRecord> = rdr.records().map(Result::unwrap).collect();
    assert_eq!(rows.len(), 6);
    let seeds: Vec<&str> = rows.iter().map(|r| &r[0]).collect();
    assert_eq!(seeds, ["0", "1", "2", "3", "4", "mean"]);
    for col in 1..header.len() {
        let values: Vec<f64> = rows[..5].iter().filter_map(|r| r[col].parse().ok()).collect();
        if values.is_empty() {
            assert_eq!(&rows[5][col], "");
            continue;
        }
        let mean: f64 = rows[5][col].parse().unwrap();
        let expected = values.iter().sum::<f64>() / values.len() as f64;
        // per-seed values are printed to 6 decimals
        assert!((mean - expected).abs() < 1e-6, "column {}: {mean} vs {expected}", &header[col]);
    }
}

#[test]
fn match_ranks_within_the_unit() {
    let dir = TempDir::new().unwrap();
    let out = run_generate(&dir, "out.csv", &[]);
    let schema = dir.path().join("schema.json");
    let query = dir.path().join("query.json");
    fs::write(&query, r#"{"unit_id": "L5M6V9", "attributes": {"avg_age": 53, "mortgage": "yes"}}"#).unwrap();
    let result = sync(&["match", "--pool", s(&out), "--schema", s(&schema), "--query", s(&query), "--k", "3"]);
    assert!(result.status.success(), "{}", String::from_utf8_lossy(&result.stderr));
    let text = String::from_utf8(result.stdout).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], "rank,unit_id,person_index,distance,avg_age,mortgage,two_languages,tenure");
    assert_eq!(lines.len(), 4);
    assert!(lines[1..].iter().all(|l| l.split(',').nth(1) == Some("L5M6V9")));
    let distances: Vec<f64> = lines[1..].iter().map(|l| l.split(',').nth(3).unwrap().parse().unwrap()).collect();
    assert!(distances.windows(2).all(|w| w[0] <= w[1]));
}

#[test]
fn match_with_absent_unit_fails() {
    let dir = TempDir::new().unwrap();
    let out = run_generate(&dir, "out.csv", &[]);
    let schema = dir.path().join("schema.json");
    let query = dir.path().join("query.json");
    fs::write(&query, r#"{"unit_id": "K1A0B1", "attributes": {"mortgage": "yes"}}"#).unwrap();
    let result = sync(&["match", "--pool", s(&out), "--schema", s(&schema), "--query", s(&query)]);
    assert!(!result.status.success());
    assert!(String::from_utf8_lossy(&result.stderr).contains("K1A0B1"));
}
