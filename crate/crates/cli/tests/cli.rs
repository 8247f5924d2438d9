use std::collections::HashMap;
use std::path::Path;
use std::process::{Command, Output};

fn facet(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_facet")).args(args).current_dir(cwd).output().unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn generate(dir: &Path) {
    let o = facet(&["synth", "gen", "--out", "fx", "--images", "1000", "--cases", "10", "--stores"], dir);
    assert!(o.status.success(), "{}", stderr(&o));
}

#[test]
fn baseline_run_writes_outputs() {
    let dir = tempfile::tempdir().unwrap();
    generate(dir.path());
    let o = facet(
        &["eval", "run", "--mode", "baseline", "--config", "fx/config.toml", "--benchmark", "fx/benchmark.jsonl", "--out", "run"],
        dir.path(),
    );
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let run = dir.path().join("run");
    for f in ["report.csv", "report.json", "cost.csv", "manifest.json"] {
        assert!(run.join(f).is_file(), "missing {f}");
    }
    let report = std::fs::read_to_string(run.join("report.csv")).unwrap();
    assert!(report.starts_with("facet,k,recall,n_cases,mode\n"));
    assert!(report.contains("avg_macro,5,"));
    let cost = std::fs::read_to_string(run.join("cost.csv")).unwrap();
    assert!(cost.contains("baseline,total,N*v + M*t,1080.0,1080.0"), "{cost}");
    let manifest: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(run.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["mode"], "baseline");
}

#[test]
fn zero_sample_size_is_validation_error() {
    let dir = tempfile::tempdir().unwrap();
    generate(dir.path());
    let o = facet(
        &["eval", "run", "--mode", "approx", "--k-sample", "0", "--config", "fx/config.toml", "--benchmark", "fx/benchmark.jsonl", "--out", "r"],
        dir.path(),
    );
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("--k-sample"));
}

#[test]
fn missing_input_is_io_error() {
    let dir = tempfile::tempdir().unwrap();
    let o = facet(&["eval", "run", "--mode", "baseline", "--benchmark", "absent.jsonl", "--out", "r"], dir.path());
    assert_eq!(o.status.code(), Some(2));
    let o = facet(&["eval", "run", "--mode", "nonsense", "--benchmark", "absent.jsonl", "--out", "r"], dir.path());
    assert_eq!(o.status.code(), Some(1));
    let o = facet(&["eval", "frobnicate"], dir.path());
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn file_stores_reproduce_synthetic_reports() {
    let dir = tempfile::tempdir().unwrap();
    generate(dir.path());
    let common = ["--benchmark", "fx/benchmark.jsonl", "--registry", "fx/registry.json"];
    let mut a = vec!["eval", "run", "--mode", "selected", "--config", "fx/config.toml", "--out", "syn"];
    a.extend(common);
    assert!(facet(&a, dir.path()).status.success());
    let mut b = vec!["eval", "run", "--mode", "selected", "--provider", "files", "--stores", "fx/stores", "--out", "files"];
    b.extend(common);
    let o = facet(&b, dir.path());
    assert!(o.status.success(), "{}", stderr(&o));
    let read = |p: &str| std::fs::read_to_string(dir.path().join(p)).unwrap();
    assert_eq!(read("syn/report.csv"), read("files/report.csv"));
    assert_eq!(read("syn/selection.json"), read("files/selection.json"));
    let o = facet(&["report", "merge", "--out", "merged.csv", "syn/report.json", "files/report.json"], dir.path());
    assert!(o.status.success());
    assert_eq!(read("merged.csv").lines().count(), 2 * read("syn/report.csv").lines().count() - 1);
}

#[test]
fn prompt_commands() {
    let dir = tempfile::tempdir().unwrap();
    let o = facet(&["prompt", "select", "--query", "Find me an everyday image with 2 people."], dir.path());
    assert_eq!(String::from_utf8_lossy(&o.stdout), "gpt-count_of_people\tlexical\n");
    let o = facet(&["prompt", "gen", "--attribute", "time of day", "--answers", "morning,night"], dir.path());
    assert_eq!(String::from_utf8_lossy(&o.stdout), "What time of day is depicted in this image?\n");
    let o = facet(&["prompt", "select", "--query", "x", "--selector", "external"], dir.path());
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn default_world_sweep_improves_with_k() {
    let dir = tempfile::tempdir().unwrap();
    let o = facet(&["sweep", "--ks", "5,10,20,40,100", "--seeds", "5", "--out", "sw"], dir.path());
    assert!(o.status.success(), "{}", stderr(&o));
    let summary = std::fs::read_to_string(dir.path().join("sw/sweep_summary.csv")).unwrap();
    let mut means: HashMap<(String, usize), f64> = HashMap::new();
    for line in summary.lines().skip(1) {
        let f: Vec<&str> = line.split(',').collect();
        if f[2] == "mean" {
            means.insert((f[0].to_string(), f[1].parse().unwrap()), f[4].parse().unwrap());
        }
    }
    let facets: Vec<String> = means.keys().map(|k| k.0.clone()).collect();
    assert_eq!(means.len(), 8 * 5);
    for f in facets {
        assert!(means[&(f.clone(), 100)] > means[&(f.clone(), 5)], "{f}");
    }
}
