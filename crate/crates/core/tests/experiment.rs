use std::fs;
use std::path::Path;

use fedproto::config::ExperimentManifest;
use fedproto::experiment::{load_summaries, report_text, run_experiment, ROUNDS_HEADER};

fn tiny(out: &Path, extra_cells: &str) -> ExperimentManifest {
    let text = format!(
        r#"
seeds = [7]

[dataset]
scheme = "synthetic"
num_clients = 6
total_samples = 240

[model]
hidden_dims = [8]

[sim]
rounds = 2
local_epochs = 2
clients_per_round = 3
mmd_every = 1

[centralized]
epochs = 2

[[cells]]
strategy = "fedavg"
deltas = [0.0, 0.5]

[[cells]]
strategy = "fedproto"
deltas = [0.0, 0.5]
{extra_cells}
"#
    );
    let mut m = ExperimentManifest::from_toml(&text, Path::new("tiny.toml")).unwrap();
    m.output_dir = out.to_path_buf();
    m
}

#[test]
fn two_rounds_write_three_rows_and_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let m = tiny(dir.path(), "");
    let outcome = run_experiment(&m, Some("fedproto@0")).unwrap();
    assert!(outcome.failures.is_empty());
    assert_eq!(outcome.summaries.len(), 1);

    let cell = dir.path().join("fedproto_d0_s7");
    let csv = fs::read_to_string(cell.join("rounds.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], ROUNDS_HEADER);
    assert_eq!(lines.len(), 1 + 3);
    for l in &lines[1..] {
        assert_eq!(l.split(',').count(), 7);
    }

    let summary: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(cell.join("summary.json")).unwrap()).unwrap();
    for key in [
        "strategy",
        "delta",
        "seed",
        "final_accuracy",
        "final_loss",
        "final_amm",
        "final_mmd",
        "wall_time_s",
    ] {
        assert!(summary.get(key).is_some(), "summary.json lacks {key}");
    }
    let plots: Vec<String> = fs::read_dir(cell.join("plotdata"))
        .unwrap()
        .map(|e| e.unwrap().file_name().to_string_lossy().into_owned())
        .collect();
    assert!(plots.iter().any(|p| p == "accuracy.csv"), "{plots:?}");
    assert!(dir.path().join("centralized_s7.json").exists());
}

#[test]
fn reruns_are_byte_identical() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    run_experiment(&tiny(a.path(), ""), None).unwrap();
    run_experiment(&tiny(b.path(), ""), None).unwrap();
    for cell in ["fedavg_d0_s7", "fedavg_d0.5_s7", "fedproto_d0_s7", "fedproto_d0.5_s7"] {
        let x = fs::read(a.path().join(cell).join("rounds.csv")).unwrap();
        let y = fs::read(b.path().join(cell).join("rounds.csv")).unwrap();
        assert_eq!(x, y, "{cell} differs between reruns");
    }
}

#[test]
fn ffd_attached_against_matching_fedavg() {
    let dir = tempfile::tempdir().unwrap();
    let outcome = run_experiment(&tiny(dir.path(), ""), None).unwrap();
    for s in &outcome.summaries {
        if s.strategy == "fedavg" {
            assert_eq!(s.ffd_vs_fedavg, None);
        } else {
            assert!(s.ffd_vs_fedavg.is_some_and(f64::is_finite), "{s:?}");
        }
    }
    let report = report_text(&load_summaries(dir.path()).unwrap());
    assert!(report.contains("FFD"), "{report}");
}

#[test]
fn ffd_absent_without_fedavg_cell() {
    let dir = tempfile::tempdir().unwrap();
    let outcome = run_experiment(&tiny(dir.path(), ""), Some("fedproto")).unwrap();
    assert!(outcome.summaries.iter().all(|s| s.ffd_vs_fedavg.is_none()));
}

#[test]
fn missing_idx_file_fails_without_rounds_csv() {
    let dir = tempfile::tempdir().unwrap();
    let text = r#"
[dataset]
scheme = "label_shard"
images = "nowhere/images.idx"
labels = "nowhere/labels.idx"
num_clients = 10

[[cells]]
strategy = "fedavg"
"#;
    let mut m = ExperimentManifest::from_toml(text, Path::new("bad.toml")).unwrap();
    m.output_dir = dir.path().to_path_buf();
    assert!(run_experiment(&m, None).is_err());
    let any_rounds = walk(dir.path()).iter().any(|p| p.ends_with("rounds.csv"));
    assert!(!any_rounds);
}

#[test]
fn dataset_cache_is_reused() {
    let dir = tempfile::tempdir().unwrap();
    let m = tiny(dir.path(), "");
    run_experiment(&m, Some("fedavg@0")).unwrap();
    let entries = |p: &Path| fs::read_dir(p).unwrap().count();
    let cache = m.cache_dir();
    assert_eq!(entries(&cache), 1);
    run_experiment(&m, Some("fedavg@0.5")).unwrap();
    assert_eq!(entries(&cache), 1);

    let mut other = m.clone();
    if let fedproto::config::DatasetConfig::Synthetic(s) = &mut other.dataset {
        s.seed += 1;
    }
    run_experiment(&other, Some("fedavg@0")).unwrap();
    assert_eq!(entries(&cache), 2);
}

#[test]
fn failed_filter_is_an_error() {
    let dir = tempfile::tempdir().unwrap();
    assert!(run_experiment(&tiny(dir.path(), ""), Some("fairness")).is_err());
}

#[test]
fn ablation_cells_get_distinct_directories() {
    let dir = tempfile::tempdir().unwrap();
    let extra = r#"
[[cells]]
strategy = "fedavg"
deltas = [0.5]
tolerate_stragglers = true

[[cells]]
strategy = "fedproto"
variant = "lpm_only"
deltas = [0.5]
"#;
    let outcome = run_experiment(&tiny(dir.path(), extra), Some("fedavg-tol,fedproto-lpm_only")).unwrap();
    let mut names: Vec<String> = outcome.summaries.iter().map(|s| s.strategy.clone()).collect();
    names.sort();
    assert_eq!(names, ["fedavg-tol", "fedproto-lpm_only"]);
    assert!(dir.path().join("fedavg-tol_d0.5_s7/rounds.csv").exists());
    assert!(dir.path().join("fedproto-lpm_only_d0.5_s7/rounds.csv").exists());
}

fn walk(p: &Path) -> Vec<std::path::PathBuf> {
    let mut out = Vec::new();
    if let Ok(rd) = fs::read_dir(p) {
        for e in rd.flatten() {
            let path = e.path();
            if path.is_dir() {
                out.extend(walk(&path));
            } else {
                out.push(path);
            }
        }
    }
    out
}
